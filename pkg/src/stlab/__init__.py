"""Shift-equivariant image-to-image networks for spatial point processes.

Networks trained on small windows of a stationary scene are run unchanged on
larger windows.  The package holds the pieces needed to test that: point-set
rasterisation, a multi-target tracking simulator, a numpy convolutional
network with its own training loop, transfer metrics, and a communication
placement benchmark.
"""

__version__ = "0.1.0"
