"""Challenge management: scanning, service hosting, arbitration and benchmarks."""

from ctfagent.harness.arbitration import Arbiter, ArbiterClient, ArbitrationServer, Verdict
from ctfagent.harness.scan import ChallengeIndex, scan
from ctfagent.harness.service import ChallengeServer, ServiceError, ServiceHost

__all__ = [
    "Arbiter",
    "ArbiterClient",
    "ArbitrationServer",
    "ChallengeIndex",
    "ChallengeServer",
    "ServiceError",
    "ServiceHost",
    "Verdict",
    "scan",
]
