"""Feasibility-aware prompt-domain control, simulated on a multi-fidelity
Bayesian optimization testbed.

Subpackages of interest:

* ``feasibility`` -- memory and saturation limits on prompt length
* ``seqcore`` -- feasible-sequence algebra and submodularity checks
* ``projection`` -- exemplar selection, interval summaries, soft projection
* ``policy`` -- tabular softmax policies: distillation and online adaptation
* ``mfbo`` -- the multi-fidelity optimization environment
* ``agents`` -- protocol codec, oracle and student decision policies
* ``controller`` -- the deployment control loop and ablation summaries
* ``harness`` -- config, orchestration, and report emission
"""

__version__ = "0.1.0"
