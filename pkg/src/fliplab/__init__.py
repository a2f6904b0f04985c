"""Desk-scale lab for targeted bit-flip attacks on a quantized agent model.

Subsystems:
  autograd   reverse-mode tape over float64 numpy arrays
  model      quantized toy transformer, bit-level weight access, checkpoints
  kernels    hot numeric paths (numba njit with a numpy fallback)
  objective  attack loss construction over an optimization set
  search     gradient-guided greedy bit search and its ablation baselines
  pipeline   deterministic three-stage agent simulator with mock tools
  corpus     synthetic shopping-episode corpus with split management
  experiment metrics, orchestration, defense runs, CSV reporting
"""

__version__ = "0.1.0"
