"""MRI to amyloid-PET synthesis toolkit: phantoms, preprocessing, a numpy
3D conditional GAN, and SSIM/PSNR evaluation."""
__version__ = "0.1.0"
