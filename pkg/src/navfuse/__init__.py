"""navfuse: desk-scale object-goal navigation with fused action-probability targets.

Modules
-------
gridworld    occupancy-grid world, actions, observations, geodesic distances
expert       shortest-path expert and the demonstration corpus format
histpolicy   recurrent behaviour-cloning policy (the teacher)
fusion       collision-masked fused training targets
promptfmt    prompt template and the action-probability sentence grammar
student      student MLP trained on fused targets
backends     policy backends, including the remote text endpoint
evalharness  rollouts, Success / SoftSPL metrics and reports
"""

__version__ = "0.1.0"
