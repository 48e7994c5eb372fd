"""Single-image LDR-to-HDR reconstruction with a conditional denoising
diffusion model: autoencoder conditioning with classifier-free guidance,
a resolution-shifted cosine noise schedule, a multiscale noise loss, and
an exposure-contrast loss term."""

__version__ = "0.1.0"
