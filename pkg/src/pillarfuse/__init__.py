"""Desk-scale lidar + RGB fusion detector for 3D vehicle boxes.

Subpackage map:
    autodiff    float64 reverse-mode tensor engine
    layers      linear/conv/batchnorm blocks, AdamW
    checkpoint  dotted-name binary parameter files
    geometry    oriented 3D boxes, IoU, target codec, NMS, anchors
    kitti_io    point clouds, calibrations, labels, PPM images, projection
    pillars     pillar partition and pseudo-image scatter
    fusion      point/image feature fusion front ends
    network     backbone, detection head, losses, train/infer loops
    augment     ground-truth sampling database and global augmentation
    evaluation  matching, AP at 40 recall positions, FP accounting
    synthetic   self-contained KITTI-format scene generator
    config      YAML run configuration
    cli         command-line entry points
"""

__version__ = "0.1.0"
