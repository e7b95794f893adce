"""Real-time teleoperation stack with an incrementally trained splat map.

A simulated robot streams posed RGB-D frames; a single-writer mapper densifies
and optimizes a gaussian-splat scene while any number of viewer lanes render
the latest published snapshot concurrently. Wire codecs, the simulator, the
service loop, and benchmark metrics live in their own modules.
"""

__version__ = "0.1.0"
