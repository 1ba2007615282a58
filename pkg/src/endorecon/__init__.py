"""Monocular RGBD endoscopic reconstruction toolkit.

Scale-consistent depth estimation, temporally refined depth maps, direct
photometric odometry with a dog-leg trust region, TSDF fusion with marching
cubes meshing, trajectory evaluation, and a synthetic benchmark generator.
"""

__version__ = "0.1.0"
