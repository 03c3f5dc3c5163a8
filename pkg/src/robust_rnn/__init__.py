"""Recurrent sequence-to-sequence system identification inside convex sets
that certify incremental l2 stability or a prescribed incremental gain bound.
"""

from .benchmark import (Dataset, MsdConfig, SignalConfig, SplitConfig,
                        gen_input, load_dataset, make_dataset, msd_derivative,
                        save_dataset, spring_gamma)
from .certificates import (EPSILON, CertifiedBundle, FeasibilityReport,
                           assemble_lmi, bisect_gamma, embed_cirnn, embed_lti,
                           export_certificate, feasibility_margin,
                           iqc_quadratic_form, storage_matrix)
from .evaluation import (AttackConfig, RobustnessReport, contraction_trial,
                         gain_trial, lipschitz_attack, nse, nse_sweep)
from .models import (CiRnn, Elman, ExplicitModel, ImplicitParams, Lstm,
                     SeqBatch, SRnn, activation_apply, init_feasible,
                     load_model, save_model, simulate, to_explicit)
from .numerics import (NotPositiveDefiniteError, PdReport, cholesky_logdet,
                       pd_margin, solve_pd, sym)
from .training import (TrainConfig, TrainHistory, barrier_objective, gradient,
                       sim_loss, train)

__version__ = "0.1.0"
