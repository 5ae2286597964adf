"""Virtual IMU synthesis from tracked human pose.

Converts tracked 2D/3D human-pose data plus depth maps into calibrated,
ego-motion-compensated 3D motion, synthesizes on-body accelerometer /
gyroscope / magnetometer streams from it, adapts their distribution to a
target sensor domain, and evaluates activity classifiers trained on
virtual, real, and mixed data.
"""

__version__ = "0.1.0"
