"""Spectral detection of adversarial images."""

__version__ = "0.1.0"

from .attacks import AttackConfig, fgsm, momentum_attack, pgd, random_sign_perturbation, run_attack
from .compression import LowRankCompressor, truncate_images
from .datasets import (
    LabeledDataset,
    load_cifar10,
    load_cifar10_binary,
    load_mnist,
    load_mnist_idx,
    synthetic_low_rank,
)
from .detector import (
    CalibrationProfile,
    DetectionReport,
    SpectralDetector,
    Verdict,
    calibrate,
    classify,
    evaluate,
    load_profile,
    rho,
    save_profile,
    score,
    select_m,
)
from .image import (
    Image,
    ImageMatrix,
    Perturbation,
    RotationPair,
    apply_perturbation,
    check_norm_inequalities,
    norm_2,
    norm_frobenius,
    norm_max,
    random_rotation,
    rotate,
    to_image,
    to_image_matrix,
)
from .models import TinyClassifier, load_model, save_model
from .perturbation import (
    PerturbationReport,
    first_order_estimate,
    mirsky_check,
    perturbation_report,
    wedin_bound,
    weyl_check,
)
from .svd import (
    SvdResult,
    compute_svd,
    energy_fraction,
    reconstruct,
    singular_values,
    subspace_angle_sin,
    truncate,
)
