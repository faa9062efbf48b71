"""Synthetic multispectral leaf generation: skeleton ResVAE, Pix2pix colorization and anomaly-based evaluation."""

__version__ = "0.1.0"
