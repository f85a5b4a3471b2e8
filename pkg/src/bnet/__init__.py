"""BNET: batch normalization with a depth-wise convolutional recovery step.

A small numpy training library built around BN/BNET/GN/GNET layers with
hand-written backward passes, plus cost counting and heatmap analysis.
"""

__version__ = "0.1.0"
