"""
Toy aligned dual encoders (image and text towers), the cosine-dissimilarity loss J, the
input-gradient oracle used by the attacks, contrastive training and
checkpoint IO.
"""

import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from lssa_lab.config import TrainConfig, coerce
from lssa_lab.data import ShapeCaptionDataset, TokenSequence, Vocabulary
from lssa_lab.errors import (
    ConfigError,
    DivergenceError,
    EmptyInputError,
    MissingArtifactError,
    NumericalError,
    SchemaVersionError,
    ShapeMismatchError,
    SingularEmbeddingError,
    VocabularyMismatchError,
)
from lssa_lab.seeds import torch_generator

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 2
CHECKPOINT_MAGIC = b"LSSA-CKPT\n"
PATCH = 8
NORM_EPS = 1e-12


# ---------------------------
# Encoders
# ---------------------------
class ConvImageEncoder(nn.Module):
    """conv stack + average pooling + linear projection"""

    def __init__(self, image_shape: Tuple[int, int, int], d: int):
        super().__init__()
        c, h, w = image_shape
        self.features = nn.Sequential(
            nn.Conv2d(c, 16, 3, padding=1),
            nn.GELU(),
            nn.AvgPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.GELU(),
            nn.AvgPool2d(2),
            nn.Conv2d(32, 32, 3, padding=1),
            nn.GELU(),
        )
        self.proj = nn.Linear(32 * (h // 4) * (w // 4), d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.features(x).flatten(1))


class PatchImageEncoder(nn.Module):
    """non-overlapping 8x8 patches, a per-patch dense layer, a cross-patch mixing layer, projection"""

    def __init__(self, image_shape: Tuple[int, int, int], d: int, hidden: int = 64):
        super().__init__()
        c, h, w = image_shape
        if h % PATCH or w % PATCH:
            raise ShapeMismatchError(f"patch encoder needs H and W divisible by {PATCH}, got {h}x{w}")
        self.num_patches = (h // PATCH) * (w // PATCH)
        self.embed = nn.Linear(c * PATCH * PATCH, hidden)
        self.mix = nn.Linear(self.num_patches, self.num_patches)
        self.proj = nn.Linear(self.num_patches * hidden, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c = x.shape[:2]
        patches = x.unfold(2, PATCH, PATCH).unfold(3, PATCH, PATCH)  # B,C,h',w',p,p
        patches = patches.permute(0, 2, 3, 1, 4, 5).reshape(b, self.num_patches, c * PATCH * PATCH)
        h = F.gelu(self.embed(patches))
        h = h + F.gelu(self.mix(h.transpose(1, 2))).transpose(1, 2)
        return self.proj(h.flatten(1))


class TextEncoder(nn.Module):
    """token table + positional embedding, two masked residual convolutions over tokens, masked mean pooling, projection"""

    def __init__(self, vocab_size: int, max_len: int, d: int, pad_id: int = 0, width: int = 64):
        super().__init__()
        self.tok = nn.Embedding(vocab_size, width, padding_idx=pad_id)
        self.pos = nn.Embedding(max_len, width)
        self.convs = nn.ModuleList([nn.Conv1d(width, width, kernel_size=3, padding=1) for _ in range(2)])
        self.proj = nn.Linear(width, d)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(ids.shape[1], device=ids.device)
        m = mask.unsqueeze(-1).to(self.tok.weight.dtype)
        h = (self.tok(ids) + self.pos(positions)) * m
        for conv in self.convs:
            # padding positions stay zero
            h = (h + F.gelu(conv(h.transpose(1, 2)).transpose(1, 2))) * m
        pooled = h.sum(1) / m.sum(1)
        return self.proj(pooled)


class EncoderPair(nn.Module):
    """
    Image and text encoders sharing one L2-normalized embedding space of dimension d.
    Inference only after training: no dropout, parameters frozen.
    """

    def __init__(
        self,
        config: TrainConfig,
        vocab_size: int,
        vocab_hash: str,
        image_shape: Tuple[int, int, int] = (3, 32, 32),
        pad_id: int = 0,
    ):
        super().__init__()
        self.config = config
        self.architecture_tag = config.arch
        self.tag = config.tag
        self.seed = config.seed
        self.d = config.d
        self.max_len = config.max_len
        self.vocab_size = vocab_size
        self.vocab_hash = vocab_hash
        self.pad_id = pad_id
        self.image_shape = tuple(int(s) for s in image_shape)
        self.regression: Optional[Dict[str, Any]] = None
        self.vocabulary: Optional[Vocabulary] = None

        if config.arch == "conv":
            self.image_encoder = ConvImageEncoder(self.image_shape, config.d)
        elif config.arch == "patch":
            self.image_encoder = PatchImageEncoder(self.image_shape, config.d)
        else:
            raise ConfigError(f"unknown architecture '{config.arch}'")
        self.text_encoder = TextEncoder(vocab_size, config.max_len, config.d, pad_id=pad_id)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def attach(self, vocabulary: Vocabulary) -> "EncoderPair":
        if vocabulary.hash != self.vocab_hash:
            raise VocabularyMismatchError(self.vocab_hash, vocabulary.hash)
        self.vocabulary = vocabulary
        return self

    def freeze(self) -> "EncoderPair":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    # --- differentiable paths ---
    def image_features(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise ShapeMismatchError(f"expected images of shape (B, {self.image_shape}), got {tuple(x.shape)}")
        return F.normalize(self.image_encoder(x.to(self.dtype)), dim=-1)

    def text_features(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.text_encoder(ids, mask), dim=-1)

    def batch_tokens(self, seqs: Sequence[TokenSequence]) -> Tuple[torch.Tensor, torch.Tensor]:
        ids = torch.full((len(seqs), self.max_len), self.pad_id, dtype=torch.long)
        mask = torch.zeros((len(seqs), self.max_len), dtype=torch.bool)
        for row, t in enumerate(seqs):
            if len(t.ids) == 0:
                raise EmptyInputError("cannot encode an empty token sequence")
            if len(t.ids) > self.max_len:
                raise ShapeMismatchError(f"sequence of length {len(t.ids)} exceeds max_len={self.max_len}")
            bad = [i for i in t.ids if not 0 <= i < self.vocab_size or i == self.pad_id]
            if bad:
                raise ConfigError(f"token ids out of range for vocabulary of {self.vocab_size}: {bad}", code="token_out_of_range")
            ids[row, : len(t.ids)] = torch.tensor(t.ids, dtype=torch.long)
            mask[row, : len(t.ids)] = True
        return ids, mask

    # --- inference ---
    @torch.no_grad()
    def encode_image(self, v) -> torch.Tensor:
        v = torch.as_tensor(v)
        if tuple(v.shape) != self.image_shape:
            raise ShapeMismatchError(f"expected image of shape {self.image_shape}, got {tuple(v.shape)}")
        return self.image_features(v.unsqueeze(0))[0]

    @torch.no_grad()
    def encode_text(self, t: TokenSequence) -> torch.Tensor:
        ids, mask = self.batch_tokens([t])
        return self.text_features(ids, mask)[0]

    @torch.no_grad()
    def embed_images(self, images: torch.Tensor, chunk: int = 256) -> torch.Tensor:
        out = [self.image_features(images[i : i + chunk]) for i in range(0, images.shape[0], chunk)]
        return torch.cat(out) if out else torch.zeros((0, self.d), dtype=self.dtype)

    @torch.no_grad()
    def embed_texts(self, seqs: Sequence[TokenSequence]) -> torch.Tensor:
        if not seqs:
            return torch.zeros((0, self.d), dtype=self.dtype)
        ids, mask = self.batch_tokens(seqs)
        return self.text_features(ids, mask)

    def token_embeddings(self) -> np.ndarray:
        return self.text_encoder.tok.weight.detach().cpu().double().numpy()


# ---------------------------
# Loss J
# ---------------------------
@dataclass(frozen=True)
class LossSpec:
    kind: Literal["cosine_dissimilarity"] = "cosine_dissimilarity"
    reduction: Literal["mean"] = "mean"


DEFAULT_LOSS = LossSpec()


def loss(spec: LossSpec, e_img, e_txt_set) -> torch.Tensor:
    """
    mean over the text set of (1 - cos(e_img, e_txt)), range [0, 2].
    e_img may be (d,) -> scalar or (B, d) -> (B,).
    """
    if spec.kind != "cosine_dissimilarity" or spec.reduction != "mean":
        raise ConfigError(f"unsupported loss {spec}")
    e_img = torch.as_tensor(e_img)
    e_txt = torch.as_tensor(e_txt_set)
    if not torch.is_floating_point(e_img):
        e_img = e_img.double()
    e_txt = e_txt.to(e_img.dtype)
    if e_txt.dim() == 1:
        e_txt = e_txt.unsqueeze(0)
    if e_txt.shape[0] == 0:
        raise EmptyInputError("loss needs at least one text embedding")

    img = e_img.unsqueeze(0) if e_img.dim() == 1 else e_img
    img_norm = img.norm(dim=-1)
    txt_norm = e_txt.norm(dim=-1)
    if bool((img_norm <= NORM_EPS).any()) or bool((txt_norm <= NORM_EPS).any()):
        raise SingularEmbeddingError("zero-norm embedding: cosine loss is undefined")
    cos = (img @ e_txt.T) / (img_norm.unsqueeze(1) * txt_norm.unsqueeze(0))
    out = (1.0 - cos).mean(dim=1)
    return out[0] if e_img.dim() == 1 else out


def _identity(x: torch.Tensor) -> torch.Tensor:
    return x


def input_gradients(
    pair: EncoderPair,
    v: torch.Tensor,
    text_embeddings: torch.Tensor,
    transforms: Optional[Sequence[Callable[[torch.Tensor], torch.Tensor]]] = None,
    spec: LossSpec = DEFAULT_LOSS,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Per-copy gradients of J(image(transform_j(v)), text) w.r.t. v for every transform, in one backward pass.
    Each copy owns its own leaf so gradients never mix. Returns (grads [B,C,H,W], losses [B]).
    """
    transforms = list(transforms) if transforms else [_identity]
    leaf = v.detach().to(pair.dtype).unsqueeze(0).repeat(len(transforms), 1, 1, 1).requires_grad_(True)
    with torch.enable_grad():
        copies = torch.stack([fn(leaf[j]) for j, fn in enumerate(transforms)])
        losses = loss(spec, pair.image_features(copies), text_embeddings.detach())
        if not bool(torch.isfinite(losses).all()):
            raise NumericalError("non-finite loss while computing input gradients")
        (grads,) = torch.autograd.grad(losses.sum(), leaf)
    return grads.to(v.dtype), losses.detach()


def input_gradient(pair: EncoderPair, spec: LossSpec, v, t_set) -> torch.Tensor:
    """gradient of J(image(v), text(t_set)) w.r.t. v, same shape as v"""
    v = torch.as_tensor(v)
    if tuple(v.shape) != pair.image_shape:
        raise ShapeMismatchError(f"expected image of shape {pair.image_shape}, got {tuple(v.shape)}")
    if torch.is_tensor(t_set):
        text = t_set
    else:
        text = pair.embed_texts(list(t_set))
    grads, _ = input_gradients(pair, v, text, spec=spec)
    return grads[0]


# ---------------------------
# Training
# ---------------------------
def build_pair(config: TrainConfig, dataset: ShapeCaptionDataset) -> EncoderPair:
    first = dataset.items[0].image
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        pair = EncoderPair(
            config,
            vocab_size=len(dataset.vocabulary),
            vocab_hash=dataset.vocabulary.hash,
            image_shape=tuple(first.shape),
            pad_id=dataset.vocabulary.pad_id,
        )
    return pair.attach(dataset.vocabulary)


def train_contrastive(dataset: ShapeCaptionDataset, config, show_progress: bool = False) -> EncoderPair:
    """
    Symmetric in-batch contrastive objective (image->text and text->image cross-entropy).
    Deterministic given config.seed; epochs=0 returns the initialized pair.
    """
    config = coerce(TrainConfig, config)
    train = dataset.split("train")
    if not train:
        raise EmptyInputError("cannot train on an empty training split")

    pair = build_pair(config, dataset)
    images = torch.stack([it.tensor() for it in train])
    cap_ids, cap_mask = pair.batch_tokens([c for it in train for c in it.captions])
    per = len(train[0].captions)
    cap_ids = cap_ids.view(len(train), per, -1)
    cap_mask = cap_mask.view(len(train), per, -1)

    gen = torch_generator(config.seed)
    opt = torch.optim.Adam(pair.parameters(), lr=config.lr)
    n = len(train)

    pair.train()
    epochs = tqdm(range(config.epochs), desc=f"train {config.tag}", disable=not show_progress, leave=False)
    for epoch in epochs:
        # every caption once per epoch: pass p pairs image i with its caption pick[i, p]
        pick = torch.stack([torch.randperm(per, generator=gen) for _ in range(n)])
        total, steps = 0.0, 0
        for p in range(per):
            order = torch.randperm(n, generator=gen)
            for start in range(0, n, config.batch):
                idx = order[start : start + config.batch]
                if idx.numel() < 2:
                    continue
                cap = pick[idx, p]
                img_e = pair.image_features(images[idx])
                txt_e = pair.text_features(cap_ids[idx, cap], cap_mask[idx, cap])
                logits = img_e @ txt_e.T / config.temperature
                labels = torch.arange(idx.numel())
                step_loss = (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)) / 2
                if not torch.isfinite(step_loss):
                    raise DivergenceError(f"training diverged for {config.tag}: loss={step_loss.item()} at epoch {epoch}, step {steps}")
                opt.zero_grad()
                step_loss.backward()
                opt.step()
                total += step_loss.item()
                steps += 1
        if steps:
            logger.debug(f"[train] {config.tag} epoch {epoch + 1}/{config.epochs} loss={total / steps:.4f}")
            epochs.set_postfix(loss=f"{total / steps:.4f}")

    pair.freeze()
    first = dataset.get(dataset.train_ids[0])
    pair.regression = {
        "pair_id": first.pair_id,
        "embedding": [float(x) for x in pair.encode_image(first.tensor()).tolist()],
    }
    logger.info(f"[train] {config.tag} ({config.arch}, seed={config.seed}) done after {config.epochs} epochs")
    return pair


def verify_regression(pair: EncoderPair, dataset: ShapeCaptionDataset, tol: float = 1e-6) -> float:
    """recompute the stored train-image embedding; returns the max abs deviation"""
    if not pair.regression:
        raise MissingArtifactError("regression embedding", "checkpoint carries no regression embedding")
    item = dataset.get(int(pair.regression["pair_id"]))
    stored = torch.tensor(pair.regression["embedding"], dtype=torch.float64)
    now = pair.encode_image(item.tensor()).double()
    dev = float((now - stored).abs().max())
    if dev > tol:
        raise NumericalError(f"regression embedding drifted by {dev:.3e} (> {tol:.0e}) for {pair.tag}")
    return dev


# ---------------------------
# Checkpoint IO
# ---------------------------
def checkpoint_header(pair: EncoderPair) -> Dict[str, Any]:
    return {
        "format_version": CHECKPOINT_VERSION,
        "tag": pair.tag,
        "arch": pair.architecture_tag,
        "d": pair.d,
        "seed": pair.seed,
        "vocab_hash": pair.vocab_hash,
        "vocab_size": pair.vocab_size,
        "pad_id": pair.pad_id,
        "image_shape": list(pair.image_shape),
        "training": pair.config.model_dump(mode="json"),
        "regression": pair.regression,
    }


def save_checkpoint(pair: EncoderPair, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(pair.state_dict(), buf)
    header = json.dumps(checkpoint_header(pair), sort_keys=True, ensure_ascii=False).encode("utf-8")
    path.write_bytes(CHECKPOINT_MAGIC + header + b"\n" + buf.getvalue())
    return path


def read_checkpoint_header(path) -> Tuple[Dict[str, Any], bytes]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise SchemaVersionError(f"checkpoint {path.name}", "unknown", CHECKPOINT_VERSION)
    head, _, blob = raw[len(CHECKPOINT_MAGIC) :].partition(b"\n")
    header = json.loads(head.decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise SchemaVersionError(f"checkpoint {path.name}", header.get("format_version"), CHECKPOINT_VERSION)
    return header, blob


def load_checkpoint(path, vocabulary: Optional[Vocabulary] = None) -> EncoderPair:
    """rebuild the pair from its header; a given vocabulary must match the stored hash"""
    header, blob = read_checkpoint_header(path)
    if vocabulary is not None and header["vocab_hash"] != vocabulary.hash:
        raise VocabularyMismatchError(header["vocab_hash"], vocabulary.hash)
    config = coerce(TrainConfig, header["training"])
    pair = EncoderPair(
        config,
        vocab_size=int(header["vocab_size"]),
        vocab_hash=header["vocab_hash"],
        image_shape=tuple(header["image_shape"]),
        pad_id=int(header["pad_id"]),
    )
    state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
    pair.load_state_dict(state)
    pair.regression = header.get("regression")
    if vocabulary is not None:
        pair.attach(vocabulary)
    return pair.freeze()
