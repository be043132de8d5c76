"""Private gossip averaging with correlated edge noise and Paillier verification."""

from .errors import (CryptoError, DomainError, EncodingRangeError, GopaError, NumericalError, ParameterError,
                     ProtocolError)
from .graph import NetworkGraph, assign_roles, generate_k_out, honest_subgraph, laplacian, lambda2
from .protocol import (NoiseLedger, PrivateValues, ProtocolState, gossip_step, randomization_phase, run_averaging,
                       tau_averaging_time_bound)
from .privacy import PrivacyReport, preserved_variance, privacy_report, variance_lower_bound
from .verification import VerifiedConfig, VerifiedResult, run_verified_protocol

__version__ = "0.1.0"
