"""Origin attribution for autoencoder-based image generators.

An image is attributed to a model when the model's decoder can reproduce it:
latent inversion starts from the encoder projection, refines it by
gradient descent, and the final reconstruction loss is compared with a
threshold calibrated once per model from its own outputs.
"""

from .attribution import (
    BELONGING,
    NON_BELONGING,
    CalibrationProfile,
    Verdict,
    attribute_image,
    batch_attribute,
    calibrate_model,
)
from .errors import CalibrationError, InvalidInputError, InversionDivergedError, TrainingDivergedError
from .grubbs import (
    CalibrationSummary,
    critical_value,
    grubbs_threshold,
    regularized_incomplete_beta,
    student_t_cdf,
    student_t_pdf,
)
from .inversion import (
    InversionConfig,
    InversionResult,
    convergence_step,
    initialize_latent,
    invert_batch,
    invert_latent,
    reconstruction_loss,
)
from .models import (
    Autoencoder,
    ConvVAE,
    LinearAutoencoder,
    VQVAE,
    decode,
    encode,
    load_checkpoint,
    make_belonging,
    sample_belongings,
    save_checkpoint,
)
from .training import ModelSpec, TrainingConfig, train_autoencoder

__version__ = "0.1.0"
