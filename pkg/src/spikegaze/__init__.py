"""Spiking pupil tracking on event-camera streams.

Event binning, a depthwise-separable conv + LIF network with BPTT training,
1 kHz stateful streaming inference, and neuromorphic cost projection.
"""

__version__ = "0.1.0"

SENSOR_WIDTH = 640
SENSOR_HEIGHT = 480
GRID_WIDTH = 80
GRID_HEIGHT = 60
DOWNSAMPLE = 8
