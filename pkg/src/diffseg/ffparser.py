"""Learnable Fourier-space feature filter.

A complex attentive map is multiplied elementwise onto the 2D spectrum of a
feature map, then transformed back to the spatial domain. Convention:
forward FFT unnormalized, inverse divides by H*W; the output is the real
part of the inverse transform.
"""

import torch
import torch.nn as nn


def fft2(m: torch.Tensor) -> torch.Tensor:
    """2D DFT along the two spatial axes of an (H, W, C) feature map."""
    if m.ndim != 3:
        raise ValueError(f"expected rank-3 (H, W, C) input, got rank {m.ndim}")
    if not bool(torch.isfinite(m).all()):
        raise ValueError("input contains non-finite values")
    return torch.fft.fft2(m.to(torch.complex128 if m.dtype == torch.float64 else torch.complex64),
                          dim=(0, 1), norm="backward")


def modulate(M: torch.Tensor, filt: "SpectralFilter") -> torch.Tensor:
    """Elementwise complex product of a spectrum with the filter's map."""
    A = filt.attn_map
    if M.shape != A.shape:
        raise ValueError(f"spectrum shape {tuple(M.shape)} != filter shape {tuple(A.shape)}")
    return A.to(M.dtype) * M


def ifft2(M: torch.Tensor) -> torch.Tensor:
    """Inverse 2D DFT; returns the real part as the spatial feature map."""
    if M.ndim != 3:
        raise ValueError(f"expected rank-3 (H, W, C) spectrum, got rank {M.ndim}")
    return torch.fft.ifft2(M, dim=(0, 1), norm="backward").real


class SpectralFilter(nn.Module):
    """Complex attentive map A of shape (H, W, C), stored as separate real
    and imaginary parameter tensors. Initialized to the identity (1 + 0i)."""

    def __init__(self, height: int, width: int, channels: int, trainable: bool = True):
        super().__init__()
        self.shape = (height, width, channels)
        real = torch.ones(height, width, channels)
        imag = torch.zeros(height, width, channels)
        if trainable:
            self.real = nn.Parameter(real)
            self.imag = nn.Parameter(imag)
        else:
            self.register_buffer("real", real)
            self.register_buffer("imag", imag)

    @property
    def attn_map(self) -> torch.Tensor:
        return torch.complex(self.real, self.imag)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        return ffparser_apply(m, self)

    def apply_nchw(self, x: torch.Tensor) -> torch.Tensor:
        """Apply the filter to a batched (B, C, H, W) feature map."""
        H, W, C = self.shape
        if x.shape[1:] != (C, H, W):
            raise ValueError(f"expected (B, {C}, {H}, {W}), got {tuple(x.shape)}")
        spec = torch.fft.fft2(x, dim=(-2, -1), norm="backward")
        A = self.attn_map.permute(2, 0, 1).to(spec.dtype)  # (C, H, W)
        out = torch.fft.ifft2(A * spec, dim=(-2, -1), norm="backward")
        return out.real


def ffparser_apply(m: torch.Tensor, filt: SpectralFilter) -> torch.Tensor:
    """ifft2(modulate(fft2(m), filt)) on an (H, W, C) feature map."""
    if tuple(m.shape) != filt.shape:
        raise ValueError(f"feature shape {tuple(m.shape)} != filter shape {filt.shape}")
    return ifft2(modulate(fft2(m), filt))
