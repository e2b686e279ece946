"""Re-ranking recommendation lists to maximize expected clicks over a session.

Modules:
    nn          reverse-mode autodiff over numpy and the network layers
    data        session records and their JSONL log format
    ltr         bounce synthesis on learning-to-rank data
    world       synthetic ground-truth worlds and session generation
    simenv      learned simulation environment (conditional CTR / PBR)
    oracle      closed-form and Monte-Carlo CTE, exhaustive optimal ranking
    policy      GRU ranking policy, decoding, greedy baselines
    trainer     REINFORCE with whitening / leave-one-out baselines
    metrics     AC, AD, CC@K, KL@K
    evaluation  offline comparison of rankers
    bench       serving benchmark
    cli         the ``cterank`` command
"""

__version__ = "0.1.0"

from .data import ItemFeatures, SessionRecord, UserFeatures  # noqa: E402,F401
from .oracle import CteProfile, cte, mc_cte, optimal_ranking  # noqa: E402,F401
