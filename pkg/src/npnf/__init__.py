"""Joint radiance-field, camera-pose and depth-distortion optimisation."""

from npnf._runtime import keep_heap

keep_heap()

__version__ = "0.1.0"
