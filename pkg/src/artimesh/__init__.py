"""artimesh: articulated 3D shape learning from single-view images.

Template SDF -> marching tetrahedra mesh -> instance deformation ->
skeletal posing -> differentiable deferred rendering, trained against
images, masks and precomputed 2D feature maps with a multi-hypothesis
viewpoint scheme.
"""

__version__ = "0.1.0"
