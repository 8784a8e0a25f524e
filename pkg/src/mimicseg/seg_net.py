"""U-Net backbone and the parallel DCT-view encoder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .contrastive import ProjectionHead
from .errors import ShapeError


def conv_block(in_ch, out_ch, groups=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, groups=groups, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1, groups=groups, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Three-stage encoder, bottleneck at 1/8 resolution, mirrored decoder."""

    def __init__(self, in_channels=1, widths=(64, 128, 256)):
        super().__init__()
        w1, w2, w3 = widths
        self.widths = tuple(widths)
        self.enc1 = conv_block(in_channels, w1)
        self.enc2 = conv_block(w1, w2)
        self.enc3 = conv_block(w2, w3)
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = conv_block(w3, w3)
        self.up3 = nn.ConvTranspose2d(w3, w3, 2, stride=2)
        self.dec3 = conv_block(2 * w3, w2)
        self.up2 = nn.ConvTranspose2d(w2, w2, 2, stride=2)
        self.dec2 = conv_block(2 * w2, w1)
        self.up1 = nn.ConvTranspose2d(w1, w1, 2, stride=2)
        self.dec1 = conv_block(2 * w1, w1)
        self.head = nn.Conv2d(w1, 1, 1)

    @property
    def latent_channels(self):
        return self.widths[2]

    def encode(self, images):
        """Images (B, 1, H, W) -> latent (B, C, H/8, W/8) and the three skips."""
        if images.dim() != 4 or images.shape[1] != self.enc1[0].in_channels:
            raise ShapeError(f"expected (B, {self.enc1[0].in_channels}, H, W), got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"image size {h}x{w} must be divisible by 8")
        s1 = self.enc1(images)
        s2 = self.enc2(self.pool(s1))
        s3 = self.enc3(self.pool(s2))
        latent = self.bottleneck(self.pool(s3))
        return latent, (s1, s2, s3)

    def decode(self, latent, skips):
        s1, s2, s3 = skips
        if latent.shape[-2] * 2 != s3.shape[-2] or latent.shape[-1] * 2 != s3.shape[-1]:
            raise ShapeError(
                f"latent {tuple(latent.shape)} does not match skip {tuple(s3.shape)}")
        x = self.dec3(torch.cat([self.up3(latent), s3], dim=1))
        x = self.dec2(torch.cat([self.up2(x), s2], dim=1))
        x = self.dec1(torch.cat([self.up1(x), s1], dim=1))
        return self.head(x)

    def forward(self, images):
        latent, skips = self.encode(images)
        return self.decode(latent, skips)


def _stage_scales(patch_size):
    """Per-stage resize factors taking H/p to H/8 over three stages."""
    if patch_size < 1 or patch_size & (patch_size - 1):
        raise ShapeError(f"patch size {patch_size} must be a power of two")
    steps = int(math.log2(patch_size)) - 3
    # positive steps upsample (p > 8), negative steps downsample (p < 8)
    scales = [0, 0, 0]
    for k in range(abs(steps)):
        scales[k % 3] += 1 if steps > 0 else -1
    return scales


class DctViewEncoder(nn.Module):
    """Three conv stages over the DCT cube, each view processed by its own group.

    Every view keeps ``per_view`` private channels through all stages, so the
    per-view feature maps stay separable; a 1x1 mix maps them to the latent
    width when the channel counts differ.  Stage strides (or upsampling for
    p > 8) bring the H/p grid to H/8.
    """

    def __init__(self, n_views, out_channels, patch_size=8, per_view=None):
        super().__init__()
        self.n_views = n_views
        self.patch_size = patch_size
        self.per_view = per_view or max(1, out_channels // n_views)
        width = n_views * self.per_view
        self.scales = _stage_scales(patch_size)
        stages = []
        in_ch = n_views
        for scale in self.scales:
            layers = []
            if scale > 0:
                layers.append(nn.Upsample(scale_factor=2 ** scale, mode="nearest"))
            elif scale < 0:
                layers.append(nn.AvgPool2d(2 ** -scale))
            layers.append(conv_block(in_ch, width, groups=n_views))
            stages.append(nn.Sequential(*layers))
            in_ch = width
        self.stages = nn.Sequential(*stages)
        self.mix = nn.Identity() if width == out_channels else nn.Conv2d(width, out_channels, 1)
        self.out_channels = out_channels

    def view_features(self, cube):
        """(B, J, h, w) cube -> (B, J, per_view, H/8, W/8) per-view features."""
        if cube.dim() != 4 or cube.shape[1] != self.n_views:
            raise ShapeError(f"expected cube with {self.n_views} channels, got {tuple(cube.shape)}")
        feats = self.stages(cube)
        b, _, h, w = feats.shape
        return feats.reshape(b, self.n_views, self.per_view, h, w)

    def forward(self, cube):
        feats = self.view_features(cube)
        return self.mix(feats.flatten(1, 2))

    def encode_views(self, cube):
        feats = self.view_features(cube)
        return self.mix(feats.flatten(1, 2)), feats


class MimicSegNet(nn.Module):
    """U-Net plus DCT branch plus the heads used by the MI and contrastive losses."""

    def __init__(self, n_views=64, patch_size=8, widths=(64, 128, 256), mi_dim=64,
                 proj_pool=4, proj_widths=(512, 256, 128), mask_branch=False):
        super().__init__()
        self.unet = UNet(1, widths)
        c = self.unet.latent_channels
        self.dct = DctViewEncoder(n_views, c, patch_size)
        self.n_views = n_views
        # MI embeddings: global average pool then a linear map
        self.mi_latent = nn.Linear(c, mi_dim)
        self.mi_view = nn.Linear(self.dct.per_view, mi_dim)
        self.proj_latent = ProjectionHead(c, proj_pool, proj_widths)
        self.proj_view = ProjectionHead(self.dct.per_view, proj_pool, proj_widths)
        self.proj_mask = ProjectionHead(1, proj_pool * 4, proj_widths) if mask_branch else None

    def encode(self, images):
        return self.unet.encode(images)

    def encode_views(self, cube):
        return self.dct.encode_views(cube)

    def decode(self, latent, skips):
        return self.unet.decode(latent, skips)

    def forward(self, images):
        return self.unet(images)

    def mi_embeddings(self, latent, view_feats):
        u = self.mi_latent(latent.mean(dim=(-2, -1)))
        v = self.mi_view(view_feats.mean(dim=(-2, -1)))
        return u, v

    def contrastive_embeddings(self, latent, view_feats, selected, masks=None):
        """Latent (B, D), selected views (B, M, D) and optional mask (B, D) embeddings."""
        b, m = selected.shape
        z = self.proj_latent(latent)
        idx = selected.to(view_feats.device)[:, :, None, None, None].expand(
            -1, -1, *view_feats.shape[2:])
        chosen = torch.gather(view_feats, 1, idx)
        v = self.proj_view(chosen.flatten(0, 1)).reshape(b, m, -1)
        y = None
        if masks is not None:
            if self.proj_mask is None:
                raise ShapeError("model was built without a mask branch")
            y = self.proj_mask(masks)
        return z, v, y


def parameter_ids(module):
    return {id(p) for p in module.parameters()}
