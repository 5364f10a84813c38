"""Airway segmentation supervision and airway-tree labelling on graphs.

Modules:

- ``volgrid``: volume I/O, Otsu threshold, connected components, pooling, dilation, tiled inference
- ``ahr``: dice loss and the hard-region supervision pyramid
- ``skeleton``: thinning, point classes and segment extraction
- ``brongraph``: segment graphs with point and voxel features, augmentation
- ``synthgen``: synthetic airway trees with exact ground truth
- ``pvgnn``: the graph network, its hand-written backward pass and training loop
"""

__version__ = "0.1.0"
