"""The generator/encoder networks with spatial population conditioning.

Generation factors as synthesize(map_latent(z), pop): a mapping MLP turns
noise into a style vector, a per-level modulation module merges the style
with a resampled population grid into scale/bias maps for adaptive
instance normalization, and a progressively grown synthesis network
renders the tile.  The discriminator factors through the encoder: a
scalar head applied to encode(image, pop).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import ContractError, resample_grid


@dataclass
class ModelConfig:
    z_dim: int = 64
    w_dim: int = 64
    base_resolution: int = 4
    max_stage: int = 3
    channels_per_stage: tuple = (64, 64, 32, 32)
    mapping_layers: int = 4
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.channels_per_stage = tuple(self.channels_per_stage)
        if len(self.channels_per_stage) != self.max_stage + 1:
            raise ContractError("channels_per_stage must have max_stage+1 entries")

    def resolution(self, stage):
        return self.base_resolution * 2 ** stage

    def to_dict(self):
        return {
            "z_dim": self.z_dim, "w_dim": self.w_dim,
            "base_resolution": self.base_resolution,
            "max_stage": self.max_stage,
            "channels_per_stage": list(self.channels_per_stage),
            "mapping_layers": self.mapping_layers,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


GROUPS = ("mapper", "synth", "mod", "encoder", "head")


class Model:
    """Parameter container plus the forward operations.

    Parameters live in a flat name -> Tensor dict; the name prefix up to
    the first dot is the ownership group used by the optimizer partition:
    mapper (noise->style), synth (synthesis convs), mod (style+population
    modulation), encoder, head (discriminator MLP).
    """

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # -- construction ------------------------------------------------------
    def _add(self, name, array):
        self.params[name] = Tensor(array, requires_grad=True)

    def _init_linear(self, rng, name, dout, din, zero=False):
        w = np.zeros((dout, din)) if zero else (
            rng.standard_normal((dout, din)) * np.sqrt(2.0 / din))
        self._add(name + ".w", w)
        self._add(name + ".b", np.zeros(dout))

    def _init_conv(self, rng, name, cout, cin, k, zero=False):
        fan = cin * k * k
        w = np.zeros((cout, cin, k, k)) if zero else (
            rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan))
        self._add(name + ".w", w)
        self._add(name + ".b", np.zeros(cout))

    def _build(self, rng):
        cfg = self.cfg
        ch = cfg.channels_per_stage
        for i in range(cfg.mapping_layers):
            din = cfg.z_dim if i == 0 else cfg.w_dim
            self._init_linear(rng, f"mapper.l{i}", cfg.w_dim, din)

        self._add("synth.const", rng.standard_normal(
            (ch[0], cfg.base_resolution, cfg.base_resolution)))
        # the style also drives the coarsest feature map; per-channel gains
        # alone cannot express per-tile spatial layout, so without this the
        # encoder has no way to steer reconstruction toward a specific tile
        self._init_linear(rng, "synth.base", ch[0] * cfg.base_resolution
                          * cfg.base_resolution, cfg.w_dim)
        for l in range(cfg.max_stage + 1):
            cin = ch[l - 1] if l > 0 else ch[0]
            self._init_conv(rng, f"synth.l{l}.c0", ch[l], cin, 3)
            self._init_conv(rng, f"synth.l{l}.c1", ch[l], ch[l], 3)
            self._init_conv(rng, f"synth.rgb{l}", 3, ch[l], 1)
            self._init_linear(rng, f"mod.l{l}.style", 2 * ch[l], cfg.w_dim)
            # population path starts inert: pure style modulation at init
            self._init_conv(rng, f"mod.l{l}.pop", 2 * ch[l], 1, 1, zero=True)

        for l in range(cfg.max_stage + 1):
            cout = ch[l - 1] if l > 0 else ch[0]
            self._init_conv(rng, f"encoder.from{l}", ch[l], 4, 1)
            self._init_conv(rng, f"encoder.l{l}.c0", ch[l], ch[l], 3)
            self._init_conv(rng, f"encoder.l{l}.c1", cout, ch[l], 3)
            self._init_linear(rng, f"encoder.proj{l}", cfg.w_dim, cout)
        # spatial mirror of synth.base: reads the flattened base-resolution
        # feature map so coarse layout survives into the style estimate
        self._init_linear(rng, "encoder.spatial", cfg.w_dim,
                          ch[0] * cfg.base_resolution ** 2)
        # direct linear readout of the coarsely resampled image: a linear
        # map fitted on generated samples is the same map everywhere, so
        # this part of the inversion transfers to real tiles exactly
        direct_res = 2 * cfg.base_resolution
        self._init_linear(rng, "encoder.direct", cfg.w_dim,
                          3 * direct_res ** 2)

        self._init_linear(rng, "head.l0", cfg.w_dim, cfg.w_dim)
        self._init_linear(rng, "head.l1", cfg.w_dim, cfg.w_dim)
        self._init_linear(rng, "head.l2", 1, cfg.w_dim, zero=True)

    # -- parameter bookkeeping --------------------------------------------
    def group_params(self, *groups):
        out = []
        for name in sorted(self.params):
            if name.split(".", 1)[0] in groups:
                out.append(self.params[name])
        return out

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def group_checksums(self):
        sums = {}
        for g in GROUPS:
            h = hashlib.sha256()
            for name in sorted(self.params):
                if name.split(".", 1)[0] == g:
                    h.update(np.ascontiguousarray(self.params[name].data).tobytes())
            sums[g] = h.hexdigest()
        return sums

    # -- helpers -----------------------------------------------------------
    def _p(self, name):
        return self.params[name]

    def _linear(self, x, name):
        return ad.linear(x, self._p(name + ".w"), self._p(name + ".b"))

    def _conv(self, x, name, pad=0):
        return ad.conv2d(x, self._p(name + ".w"), self._p(name + ".b"), pad=pad)

    @staticmethod
    def _check_pop_normalized(pop):
        pop = np.asarray(pop, dtype=np.float64)
        if pop.min() < -1.0 - 1e-9 or pop.max() > 1.0 + 1e-9:
            raise ContractError("population grid is not normalized to [-1, 1]")
        return pop

    def _pop_batch(self, pop):
        """Accept [H,W] or [N,H,W]; return [N,H,W] numpy."""
        pop = self._check_pop_normalized(pop)
        if pop.ndim == 2:
            pop = pop[None]
        if pop.ndim != 3:
            raise ContractError("pop must be [H,W] or [N,H,W]")
        return pop

    # -- forward operations ------------------------------------------------
    def map_latent(self, z):
        """Noise [N, z_dim] -> style [N, w_dim]."""
        z = ad.as_tensor(z)
        if z.ndim == 1:
            z = ad.reshape(z, (1, z.size))
        if z.shape[1] != self.cfg.z_dim:
            raise ContractError(f"latent must have {self.cfg.z_dim} entries")
        h = ad.pixel_norm(z)
        for i in range(self.cfg.mapping_layers):
            h = ad.leaky_relu(self._linear(h, f"mapper.l{i}"), self.cfg.leaky_slope)
        # styles live on the unit-RMS sphere: fixes the latent scale and
        # keeps encoder outputs in-distribution for reconstruction.  The
        # normalized residual keeps the style cloud spread over the sphere:
        # the warp contributes at most unit RMS, so the mapper cannot
        # collapse all latents onto one direction
        if self.cfg.z_dim == self.cfg.w_dim:
            h = ad.pixel_norm(h) + ad.pixel_norm(z)
        return ad.pixel_norm(h)

    def _modulation_parts(self, w, pop, level):
        """Style affine split into per-channel scale/bias [N,C,1,1] plus the
        spatial population contributions [N,C,res,res] from a 1x1 conv."""
        cfg = self.cfg
        if not 0 <= level <= cfg.max_stage:
            raise ContractError(f"level {level} out of range")
        w = ad.as_tensor(w)
        pop = self._pop_batch(pop)
        n = w.shape[0]
        c = cfg.channels_per_stage[level]
        res = cfg.resolution(level)
        style = self._linear(w, f"mod.l{level}.style")
        s_sty = ad.reshape(ad.narrow(style, 1, 0, c), (n, c, 1, 1))
        b_sty = ad.reshape(ad.narrow(style, 1, c, c), (n, c, 1, 1))
        pop_res = resample_grid(pop, (res, res))[:, None]  # [N,1,res,res]
        popmap = self._conv(Tensor(pop_res), f"mod.l{level}.pop")
        s_pop = ad.narrow(popmap, 1, 0, c)
        b_pop = ad.narrow(popmap, 1, c, c)
        return s_sty, b_sty, s_pop, b_pop

    def modulation_maps(self, w, pop, level):
        """Merge style and population into (scale, bias) maps at `level`.

        The style goes through a learned affine broadcast spatially; the
        population grid is area/nearest resampled to the level resolution
        and passed through a 1x1 convolution (zero-initialized), then the
        two are summed and split channel-wise.
        """
        s_sty, b_sty, s_pop, b_pop = self._modulation_parts(w, pop, level)
        scale = ad.add(ad.broadcast(s_sty, s_pop.shape), s_pop)
        bias = ad.add(ad.broadcast(b_sty, b_pop.shape), b_pop)
        return scale, bias

    def synthesize(self, w, pop, stage=None, alpha=1.0):
        """Style [N, w_dim] + population grid -> image tensor [N,3,R,R]."""
        cfg = self.cfg
        if stage is None:
            stage = cfg.max_stage
        if not 0 <= stage <= cfg.max_stage:
            raise ContractError(f"stage {stage} out of range")
        if not 0.0 <= alpha <= 1.0:
            raise ContractError("alpha must be in [0, 1]")
        w = ad.as_tensor(w)
        if w.ndim == 1:
            w = ad.reshape(w, (1, w.size))
        pop = self._pop_batch(pop)
        n = w.shape[0]
        slope = cfg.leaky_slope

        const = self._p("synth.const")
        x = ad.broadcast(ad.reshape(const, (1,) + const.shape),
                         (n,) + const.shape)
        x = x + ad.reshape(self._linear(w, "synth.base"), (n,) + const.shape)
        prev = None
        for level in range(stage + 1):
            if level > 0:
                prev = x
                x = ad.upsample2(x)
            # adain over the modulation_maps sum, with the style part kept
            # at [N,C,1,1] until the squash so broadcasting avoids full-map
            # temporaries
            s_sty, b_sty, s_pop, b_pop = self._modulation_parts(w, pop, level)
            gain = ad.add(ad.add(Tensor(np.float64(1.0)), s_sty), s_pop)
            shift = ad.add(b_sty, b_pop)
            for j in (0, 1):
                x = self._conv(x, f"synth.l{level}.c{j}", pad=1)
                x = ad.add(ad.mul(gain, ad.instance_norm(x)), shift)
                x = ad.leaky_relu(x, slope)
        rgb = self._conv(x, f"synth.rgb{stage}")
        if stage > 0 and alpha < 1.0:
            prev_rgb = self._conv(prev, f"synth.rgb{stage - 1}")
            rgb = ad.add(ad.mul(Tensor(np.float64(alpha)), rgb),
                         ad.mul(Tensor(np.float64(1.0 - alpha)),
                                ad.upsample2(prev_rgb)))
        return rgb

    def generate(self, z, pop, stage=None, alpha=1.0):
        return self.synthesize(self.map_latent(z), pop, stage, alpha)

    def _encode_acc(self, image, pop, stage=None, alpha=1.0):
        """RGB+population -> raw style accumulation [N, w_dim].

        The population grid is concatenated as a fourth channel at every
        resolution the encoder sees; per-level global-average projections
        are summed into a single style estimate.
        """
        cfg = self.cfg
        if stage is None:
            stage = cfg.max_stage
        if not 0 <= stage <= cfg.max_stage:
            raise ContractError(f"stage {stage} out of range")
        if not 0.0 <= alpha <= 1.0:
            raise ContractError("alpha must be in [0, 1]")
        image = ad.as_tensor(image)
        if image.ndim == 3:
            image = ad.reshape(image, (1,) + image.shape)
        if image.shape[1] != 3:
            raise ContractError("image must have exactly 3 channels")
        res = cfg.resolution(stage)
        if image.shape[2] != res or image.shape[3] != res:
            raise ContractError(f"image must be at stage resolution {res}")
        pop = self._pop_batch(pop)
        n = image.shape[0]
        slope = cfg.leaky_slope

        pop_t = Tensor(resample_grid(pop, (res, res))[:, None])
        x = ad.concat([image, pop_t], axis=1)
        x = ad.leaky_relu(self._conv(x, f"encoder.from{stage}"), slope)
        w_acc = None
        for level in range(stage, -1, -1):
            x = ad.leaky_relu(ad.instance_norm(
                self._conv(x, f"encoder.l{level}.c0", pad=1)), slope)
            x = ad.leaky_relu(ad.instance_norm(
                self._conv(x, f"encoder.l{level}.c1", pad=1)), slope)
            feat = ad.reshape(ad.tmean(x, axis=(2, 3)), (n, x.shape[1]))
            contrib = self._linear(feat, f"encoder.proj{level}")
            if level == stage and stage > 0 and alpha < 1.0:
                contrib = ad.mul(Tensor(np.float64(alpha)), contrib)
            w_acc = contrib if w_acc is None else ad.add(w_acc, contrib)
            if level > 0:
                x = ad.avg_pool2(x)
                if level == stage and alpha < 1.0:
                    half = cfg.resolution(stage - 1)
                    skip_pop = Tensor(resample_grid(pop, (half, half))[:, None])
                    skip = ad.concat([ad.avg_pool2(image), skip_pop], axis=1)
                    skip = ad.leaky_relu(
                        self._conv(skip, f"encoder.from{stage - 1}"), slope)
                    x = ad.add(ad.mul(Tensor(np.float64(alpha)), x),
                               ad.mul(Tensor(np.float64(1.0 - alpha)), skip))
        # per-level pooled features carry only global statistics; the
        # flattened base-resolution map is the mirror of the style-derived
        # base input, letting the encoder read coarse spatial layout
        flat = ad.reshape(x, (n, x.shape[1] * x.shape[2] * x.shape[3]))
        w_acc = ad.add(w_acc, self._linear(flat, "encoder.spatial"))
        direct_res = 2 * cfg.base_resolution
        d = image
        while d.shape[2] > direct_res:
            d = ad.avg_pool2(d)
        while d.shape[2] < direct_res:
            d = ad.upsample2(d)
        d = ad.reshape(d, (n, 3 * direct_res ** 2))
        return ad.add(w_acc, self._linear(d, "encoder.direct"))

    def encode(self, image, pop, stage=None, alpha=1.0):
        """RGB+population -> style vector [N, w_dim] on the unit-RMS
        sphere, same as map_latent."""
        return ad.pixel_norm(self._encode_acc(image, pop, stage, alpha))

    def discriminate(self, image, pop, stage=None, alpha=1.0):
        """Scalar realism logit per batch element: head over the encoder's
        raw accumulation -> [N].  The un-normalized features keep the
        discriminator sensitive to image magnitude, which the sphere-
        projected style deliberately is not."""
        w = self._encode_acc(image, pop, stage, alpha)
        slope = self.cfg.leaky_slope
        h = ad.leaky_relu(self._linear(w, "head.l0"), slope)
        h = ad.leaky_relu(self._linear(h, "head.l1"), slope)
        logit = self._linear(h, "head.l2")
        return ad.reshape(logit, (logit.shape[0],))
