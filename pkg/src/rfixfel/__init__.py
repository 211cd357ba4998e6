"""Random function iteration with certified operator regularity.

Building blocks for stochastic fixed-point methods (mini-batch gradient
steps, resolvents, their compositions and certificates), a seeded
ensemble runner, convergence diagnostics, and a desk-scale X-FEL
single-particle model with unknown orientations and Poisson photon counts.
"""

__version__ = "0.1.0"

from .operators import (AafneCertificate, BatchOperator, CertificationError, ProxTerm, SmoothTerm,
                        TermRegistry, apply_batch_operator, average_certificates, convex_gd_certificate,
                        forward_backward_certificate, gd_certificate, gd_step_interval, linear_rate,
                        make_operator_factory, power_certificate, transport_discrepancy,
                        verify_aafne_empirically)
from .engine import EnsembleSnapshot, SamplingSpec, Trajectory, run_chain, run_ensemble
from .xfel import (DensityParams, DetectorGrid, ForwardModel, Observation, PhotonImage, field_hat,
                   image_negloglik_and_grad, intensity, make_smooth_terms, projector_C0)
from .rotations import RotationSet
from .datagen import Dataset, DatasetHeader, generate_dataset, read_dataset, write_dataset
from .diagnostics import (ConvergenceReport, align_to_truth, cesaro_mean, fit_linear_rate,
                          moment_trajectories, psi_consistent_estimate, w2_empirical)
