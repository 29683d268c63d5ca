"""Asymmetric masked autoencoder with three reconstruction heads.

The encoder (the larger tower) sees only visible patch tokens; the decoder
rebuilds the full token sequence from encoded tokens plus a shared learnable
mask token, and three independent MLP heads predict per-patch intensity
values, vesselness logits, and skeleton logits. Positional information is
fixed 2D sine/cosine, added in both towers. Blocks are pre-norm transformer
blocks with no trailing normalization, so zero-initialized branch weights
make every block an exact identity.
"""

from dataclasses import dataclass, field

import numpy as np

from vamae import autodiff as ad
from vamae.autodiff import Parameter, Tensor
from vamae.errors import ConfigError, DimensionError
from vamae.image import PatchGrid
from vamae.masking import MaskSelection


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the desk-scale configuration (CPU-trainable in minutes);
    `paper_scale` gives the full-size variant. The final head layer always
    projects to patch_size**2, and the encoder stays the larger tower.
    """

    image_size: int = 64
    patch_size: int = 8
    encoder_depth: int = 4
    encoder_dim: int = 64
    encoder_heads: int = 4
    decoder_depth: int = 2
    decoder_dim: int = 32
    decoder_heads: int = 4
    head_hidden_dims: tuple[int, ...] = (32,)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.encoder_dim % self.encoder_heads:
            raise ConfigError("encoder_dim must be divisible by encoder_heads")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder_dim must be divisible by decoder_heads")
        for dim in (self.encoder_dim, self.decoder_dim):
            if dim % 4:
                raise ConfigError(f"embedding dim {dim} must be divisible by 4 (2D sin/cos)")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid.for_image(self.image_size, self.image_size, self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """Full-size variant: ViT-Base encoder, 512-wide decoder, 256->128 heads."""
        return cls(
            image_size=224,
            patch_size=16,
            encoder_depth=12,
            encoder_dim=768,
            encoder_heads=12,
            decoder_depth=12,
            decoder_dim=512,
            decoder_heads=8,
            head_hidden_dims=(256, 128),
        )

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "encoder_depth": self.encoder_depth,
            "encoder_dim": self.encoder_dim,
            "encoder_heads": self.encoder_heads,
            "decoder_depth": self.decoder_depth,
            "decoder_dim": self.decoder_dim,
            "decoder_heads": self.decoder_heads,
            "head_hidden_dims": list(self.head_hidden_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["head_hidden_dims"] = tuple(d.get("head_hidden_dims", (32,)))
        return cls(**d)


@dataclass
class PretrainOutput:
    """Per-patch predictions (all N rows) plus visible-token latents."""

    pred_intensity: Tensor  # (N, P^2) raw values
    pred_vesselness: Tensor  # (N, P^2) logits
    pred_skeleton: Tensor  # (N, P^2) logits
    latents: Tensor  # (n_visible, encoder_dim)


def sincos_position_embedding(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed 2D sine/cosine embedding, (rows*cols, dim), row-major order."""
    if dim % 4:
        raise ConfigError(f"sin/cos embedding needs dim divisible by 4, got {dim}")

    def embed_1d(positions, d):
        omega = 1.0 / (10000.0 ** (np.arange(d // 2, dtype=np.float64) / (d // 2)))
        angles = np.outer(positions, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    emb_r = embed_1d(rr.ravel(), dim // 2)
    emb_c = embed_1d(cc.ravel(), dim // 2)
    return np.concatenate([emb_r, emb_c], axis=1)


def trunc_normal(rng, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with resampling outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class Linear:
    def __init__(self, name, d_in, d_out, rng, dtype):
        self.w = Parameter(trunc_normal(rng, (d_in, d_out)).astype(dtype), f"{name}.w")
        self.b = Parameter(np.zeros(d_out, dtype=dtype), f"{name}.b")

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return [self.w, self.b]


class LayerNorm:
    def __init__(self, name, dim, dtype):
        self.gamma = Parameter(np.ones(dim, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim, dtype=dtype), f"{name}.beta")

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)

    def params(self):
        return [self.gamma, self.beta]


class SelfAttention:
    def __init__(self, name, dim, heads, rng, dtype):
        self.heads = heads
        self.head_dim = dim // heads
        self.dim = dim
        self.wq = Linear(f"{name}.wq", dim, dim, rng, dtype)
        self.wk = Linear(f"{name}.wk", dim, dim, rng, dtype)
        self.wv = Linear(f"{name}.wv", dim, dim, rng, dtype)
        self.wo = Linear(f"{name}.wo", dim, dim, rng, dtype)

    def __call__(self, x):
        n_tokens = x.shape[0]

        def split(t):
            t = ad.reshape(t, (n_tokens, self.heads, self.head_dim))
            return ad.transpose(t, (1, 0, 2))  # (heads, tokens, head_dim)

        q = split(self.wq(x))
        k = split(self.wk(x))
        v = split(self.wv(x))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), self.head_dim**-0.5)
        attn = ad.softmax(scores)
        out = ad.matmul(attn, v)  # (heads, tokens, head_dim)
        out = ad.reshape(ad.transpose(out, (1, 0, 2)), (n_tokens, self.dim))
        return self.wo(out)

    def params(self):
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()


class Mlp:
    def __init__(self, name, dim, rng, dtype, ratio: int = 4):
        self.fc1 = Linear(f"{name}.fc1", dim, ratio * dim, rng, dtype)
        self.fc2 = Linear(f"{name}.fc2", ratio * dim, dim, rng, dtype)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))

    def params(self):
        return self.fc1.params() + self.fc2.params()


class Block:
    """Pre-norm transformer block: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, name, dim, heads, rng, dtype):
        self.ln1 = LayerNorm(f"{name}.ln1", dim, dtype)
        self.attn = SelfAttention(f"{name}.attn", dim, heads, rng, dtype)
        self.ln2 = LayerNorm(f"{name}.ln2", dim, dtype)
        self.mlp = Mlp(f"{name}.mlp", dim, rng, dtype)

    def __call__(self, x):
        x = ad.add(x, self.attn(self.ln1(x)))
        return ad.add(x, self.mlp(self.ln2(x)))

    def params(self):
        return self.ln1.params() + self.attn.params() + self.ln2.params() + self.mlp.params()


class MlpHead:
    """Linear stack with GELU + LayerNorm after each hidden layer."""

    def __init__(self, name, d_in, hidden_dims, d_out, rng, dtype):
        self.layers = []
        self.norms = []
        prev = d_in
        for i, h in enumerate(hidden_dims):
            self.layers.append(Linear(f"{name}.fc{i}", prev, h, rng, dtype))
            self.norms.append(LayerNorm(f"{name}.ln{i}", h, dtype))
            prev = h
        self.out = Linear(f"{name}.out", prev, d_out, rng, dtype)

    def __call__(self, x):
        for fc, ln in zip(self.layers, self.norms):
            x = ln(ad.gelu(fc(x)))
        return self.out(x)

    def params(self):
        out = []
        for fc, ln in zip(self.layers, self.norms):
            out += fc.params() + ln.params()
        return out + self.out.params()


class VamaeModel:
    """Encoder, decoder, and the three per-patch reconstruction heads."""

    def __init__(self, config: ModelConfig, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.dtype = dtype
        grid = config.grid
        self.n_patches = grid.patch_count

        self.patch_embed = Linear(
            "patch_embed", config.patch_dim, config.encoder_dim, rng, dtype
        )
        self.enc_pos = sincos_position_embedding(
            grid.rows, grid.cols, config.encoder_dim
        ).astype(dtype)
        self.encoder_blocks = [
            Block(f"encoder.block{i}", config.encoder_dim, config.encoder_heads, rng, dtype)
            for i in range(config.encoder_depth)
        ]

        self.decoder_embed = Linear(
            "decoder_embed", config.encoder_dim, config.decoder_dim, rng, dtype
        )
        self.mask_token = Parameter(
            trunc_normal(rng, (1, config.decoder_dim)).astype(dtype), "mask_token"
        )
        self.dec_pos = sincos_position_embedding(
            grid.rows, grid.cols, config.decoder_dim
        ).astype(dtype)
        self.decoder_blocks = [
            Block(f"decoder.block{i}", config.decoder_dim, config.decoder_heads, rng, dtype)
            for i in range(config.decoder_depth)
        ]

        self.heads = {
            name: MlpHead(
                f"head.{name}",
                config.decoder_dim,
                config.head_hidden_dims,
                config.patch_dim,
                rng,
                dtype,
            )
            for name in ("intensity", "vesselness", "skeleton")
        }

        self._check_unique_names()

    def _check_unique_names(self):
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in model")

    def parameters(self) -> list[Parameter]:
        out = self.patch_embed.params()
        for blk in self.encoder_blocks:
            out += blk.params()
        out += self.decoder_embed.params()
        out.append(self.mask_token)
        for blk in self.decoder_blocks:
            out += blk.params()
        for name in ("intensity", "vesselness", "skeleton"):
            out += self.heads[name].params()
        return out

    def encoder_parameters(self) -> list[Parameter]:
        """Parameters frozen during stage-1 fine-tuning."""
        out = self.patch_embed.params()
        for blk in self.encoder_blocks:
            out += blk.params()
        return out

    def embed_visible(self, patches: np.ndarray, mask: MaskSelection | None) -> Tensor:
        """Project patches + add positions, keeping only unmasked tokens in order."""
        patches = np.asarray(patches, dtype=self.dtype)
        if patches.shape != (self.n_patches, self.config.patch_dim):
            raise DimensionError(
                f"expected patches {(self.n_patches, self.config.patch_dim)}, got {patches.shape}"
            )
        if mask is None:
            visible = np.arange(self.n_patches)
        else:
            if mask.total_patches != self.n_patches:
                raise DimensionError(
                    f"mask over {mask.total_patches} patches, model has {self.n_patches}"
                )
            visible = mask.visible_indices()
        tokens = self.patch_embed(Tensor(patches[visible]))
        return ad.add(tokens, Tensor(self.enc_pos[visible]))

    def encode(self, tokens: Tensor) -> Tensor:
        for blk in self.encoder_blocks:
            tokens = blk(tokens)
        return tokens

    def decode(self, latents: Tensor, mask: MaskSelection) -> Tensor:
        """Fill masked slots with the shared mask token and run the decoder."""
        visible = mask.visible_indices()
        if latents.shape[0] != len(visible):
            raise DimensionError(
                f"{latents.shape[0]} latents for {len(visible)} visible positions"
            )
        vis_tokens = self.decoder_embed(latents)
        full = ad.scatter_rows(vis_tokens, visible, self.n_patches)
        mask_fill = ad.scatter_rows(
            ad.repeat_rows(self.mask_token, mask.k), mask.masked_indices, self.n_patches
        )
        x = ad.add(ad.add(full, mask_fill), Tensor(self.dec_pos))
        for blk in self.decoder_blocks:
            x = blk(x)
        return x

    def reconstruction_heads(self, decoded: Tensor, latents: Tensor) -> PretrainOutput:
        return PretrainOutput(
            pred_intensity=self.heads["intensity"](decoded),
            pred_vesselness=self.heads["vesselness"](decoded),
            pred_skeleton=self.heads["skeleton"](decoded),
            latents=latents,
        )

    def forward_pretrain(self, patches: np.ndarray, mask: MaskSelection) -> PretrainOutput:
        latents = self.encode(self.embed_visible(patches, mask))
        decoded = self.decode(latents, mask)
        return self.reconstruction_heads(decoded, latents)

    def forward_tokens(self, patches: np.ndarray) -> Tensor:
        """Encoder over all patches (no masking); used by segmentation."""
        return self.encode(self.embed_visible(patches, None))

    def state_dict(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def load_state_dict(self, arrays: dict) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ConfigError(
                f"checkpoint/model mismatch: missing={missing[:3]} extra={extra[:3]}"
            )
        for name, param in own.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != param.data.shape:
                raise ConfigError(
                    f"shape mismatch for {name}: {arr.shape} vs {param.data.shape}"
                )
            param.data = arr.copy()
