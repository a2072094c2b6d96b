"""Profile-prediction pre-training for protein sequence encoders."""

from pkgutil import extend_path

# The compiled module may live in a separate build tree named profpred/.
__path__ = extend_path(__path__, __name__)

from ._core import (  # noqa: E402
    AMINO_ACIDS,
    Alignment,
    DataError,
    Encoder,
    Error,
    NumericalError,
    Profile,
    UsageError,
    build_labels,
    build_profile,
    contact_precision_at_l5,
    kl_divergence,
    parse_fasta,
    parse_stockholm,
    read_labels,
    spearman,
)

__all__ = [
    "AMINO_ACIDS",
    "Alignment",
    "DataError",
    "Encoder",
    "Error",
    "NumericalError",
    "Profile",
    "UsageError",
    "build_labels",
    "build_profile",
    "contact_precision_at_l5",
    "kl_divergence",
    "parse_fasta",
    "parse_stockholm",
    "read_labels",
    "spearman",
]
