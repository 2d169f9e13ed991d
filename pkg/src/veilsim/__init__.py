"""Desk-scale compound optical degradation pipeline.

Simulates aberration blur plus veiling glare, trains a latent-map-conditioned
diffusion generator on unpaired data, distills it into a one-pass forward
degrader, and trains a restoration network whose glare path structurally
inverts the forward model.
"""

__version__ = "0.1.0"

from .degradation import (  # noqa: F401
    EPSILON_T,
    GlareMaps,
    PatchGrid,
    PSFBank,
    apply_psf_patchwise,
    apply_scattering,
    compose_degradation,
    invert_scattering,
    synthesize_glare_fields,
    synthesize_psf_bank,
)
from .diffusion import (  # noqa: F401
    NoiseSchedule,
    blended_epsilon,
    ddpm_step,
    make_schedule,
    q_sample,
    sample_loop,
    strided_schedule,
)
from .errors import (  # noqa: F401
    ConfigurationError,
    MissingArtifactError,
    ValidationError,
    VeilsimError,
)
from .metrics import psnr, ssim  # noqa: F401
