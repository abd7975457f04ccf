"""Ray-exact Gaussian splatting with per-Gaussian texture maps."""

from texgs.camera import Camera, look_at
from texgs.render import RenderOptions, render_backward, render_decomposition, render_forward
from texgs.scene import Scene
from texgs.texture import TextureVariant

__version__ = "0.1.0"

__all__ = [
    "Camera", "look_at", "RenderOptions", "render_forward", "render_backward",
    "render_decomposition", "Scene", "TextureVariant",
]
