"""
Retrieval indices, R@k, attack success rate and source -> target transfer reports.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field, field_validator
from sklearn.metrics.pairwise import cosine_similarity

from lssa_lab.attacks import craft_adversarial
from lssa_lab.config import AttackBudget, coerce
from lssa_lab.data import ShapeCaptionDataset, TokenSequence
from lssa_lab.errors import ConfigError, EmptyInputError, ShapeMismatchError, VocabularyMismatchError
from lssa_lab.models import EncoderPair

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
KS = (1, 5, 10)
REPORT_COLUMNS = ["source", "target", "attack", "seed", "white_box"]
Direction = Literal["TR", "IR"]


# ---------------------------
# Index
# ---------------------------
@dataclass(frozen=True)
class RetrievalIndex:
    """
    Gallery of one image and its captions per pair, scored by cosine similarity.
    text_owner[j] is the row of the image caption j belongs to.
    """

    model_tag: str
    pair_ids: Tuple[int, ...]
    image_embeddings: np.ndarray
    text_embeddings: np.ndarray
    text_owner: np.ndarray
    similarity: np.ndarray  # images x texts

    @classmethod
    def from_embeddings(cls, image_embeddings, text_embeddings, text_owner, pair_ids=None, model_tag: str = "") -> "RetrievalIndex":
        img = np.asarray(image_embeddings, dtype=np.float64)
        txt = np.asarray(text_embeddings, dtype=np.float64)
        if img.shape[0] == 0 or txt.shape[0] == 0:
            raise EmptyInputError("retrieval index needs at least one image and one text")
        img = img / np.linalg.norm(img, axis=1, keepdims=True)
        txt = txt / np.linalg.norm(txt, axis=1, keepdims=True)
        pair_ids = tuple(range(img.shape[0])) if pair_ids is None else tuple(int(p) for p in pair_ids)
        return cls(
            model_tag=model_tag,
            pair_ids=pair_ids,
            image_embeddings=img,
            text_embeddings=txt,
            text_owner=np.asarray(text_owner, dtype=np.int64),
            similarity=cosine_similarity(img, txt),
        )

    def gallery_size(self, direction: Direction) -> int:
        return self.similarity.shape[1] if direction == "TR" else self.similarity.shape[0]


def build_index(
    pair: EncoderPair,
    dataset: ShapeCaptionDataset,
    split: str = "test",
    images: Optional[Mapping[int, Any]] = None,
    captions: Optional[Mapping[int, Sequence[TokenSequence]]] = None,
) -> RetrievalIndex:
    """
    Embed a dataset split with `pair`. `images` / `captions` replace the clean
    entries of the listed pair_ids (the adversarial index).
    """
    if dataset.vocabulary.hash != pair.vocab_hash:
        raise VocabularyMismatchError(pair.vocab_hash, dataset.vocabulary.hash)
    items = dataset.split(split)
    if not items:
        raise EmptyInputError(f"cannot index the empty '{split}' split")
    images = images or {}
    captions = captions or {}

    grid = torch.stack([torch.as_tensor(images[it.pair_id]) if it.pair_id in images else it.tensor() for it in items])
    texts: List[TokenSequence] = []
    owner: List[int] = []
    for row, it in enumerate(items):
        caps = tuple(captions.get(it.pair_id, it.captions))
        texts.extend(caps)
        owner.extend([row] * len(caps))

    img_emb = pair.embed_images(grid).double().numpy()
    txt_emb = pair.embed_texts(texts).double().numpy()
    return RetrievalIndex.from_embeddings(img_emb, txt_emb, owner, [it.pair_id for it in items], pair.tag)


# ---------------------------
# Ranking
# ---------------------------
def query_ranks(index: RetrievalIndex, direction: Direction) -> np.ndarray:
    """
    0-based rank of the correct answer per query. Ties count against the query: the rank is
    the number of wrong gallery entries scoring >= the best correct one.
    TR: one query per image, best score among its captions. IR: one query per caption.
    """
    sim = index.similarity
    owner = index.text_owner
    if direction == "TR":
        ranks = np.empty(sim.shape[0], dtype=np.int64)
        for i in range(sim.shape[0]):
            own = owner == i
            if not own.any():
                ranks[i] = sim.shape[1]
                continue
            best = sim[i, own].max()
            ranks[i] = int(np.count_nonzero(sim[i, ~own] >= best))
        return ranks
    if direction == "IR":
        ranks = np.empty(sim.shape[1], dtype=np.int64)
        rows = np.arange(sim.shape[0])
        for j in range(sim.shape[1]):
            target = sim[owner[j], j]
            ranks[j] = int(np.count_nonzero(sim[rows != owner[j], j] >= target))
        return ranks
    raise ConfigError(f"direction must be TR or IR, got '{direction}'")


def _check_k(index: RetrievalIndex, k: int, direction: Direction) -> None:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > index.gallery_size(direction):
        raise ConfigError(f"k={k} exceeds the {direction} gallery of {index.gallery_size(direction)}", code="k_too_large")


def recall_at_k(index: RetrievalIndex, k: int, direction: Direction, queries: Optional[Sequence[int]] = None) -> float:
    """percentage of queries whose correct match is in the top k"""
    _check_k(index, k, direction)
    ranks = query_ranks(index, direction)
    if queries is not None:
        ranks = ranks[list(queries)]
    if ranks.size == 0:
        raise EmptyInputError("recall over an empty query set")
    return float(100.0 * np.mean(ranks < k))


def success_rate_from_ranks(clean: np.ndarray, adv: np.ndarray, k: int = 1) -> Optional[float]:
    """ASR over queries correct at R@k before the attack; None when none were"""
    clean, adv = np.asarray(clean), np.asarray(adv)
    if clean.shape != adv.shape:
        raise ShapeMismatchError(f"rank vectors differ in length: {clean.shape} vs {adv.shape}")
    eligible = clean < k
    if not eligible.any():
        return None
    return float(100.0 * np.mean(adv[eligible] >= k))


def attack_success_rate(index_clean: RetrievalIndex, index_adv: RetrievalIndex, k: int = 1, direction: Direction = "TR") -> Optional[float]:
    if index_clean.pair_ids != index_adv.pair_ids or not np.array_equal(index_clean.text_owner, index_adv.text_owner):
        raise ShapeMismatchError("clean and adversarial indices cover different pairs")
    _check_k(index_clean, k, direction)
    return success_rate_from_ranks(query_ranks(index_clean, direction), query_ranks(index_adv, direction), k)


# ---------------------------
# Reports
# ---------------------------
class PairRecord(BaseModel):
    pair_id: int
    tr_rank_clean: int
    tr_rank_adv: int
    ir_ranks_clean: List[int]
    ir_ranks_adv: List[int]
    linf: float = 0.0
    captions_changed: int = 0


class TransferReport(BaseModel):
    schema_version: int = REPORT_VERSION
    source: str
    target: str
    attack: str
    seed: int
    white_box: bool
    budget: Dict[str, Any] = Field(default_factory=dict)
    metrics: Dict[str, Optional[float]] = Field(default_factory=dict)
    per_pair: List[PairRecord] = Field(default_factory=list)

    @field_validator("metrics")
    @classmethod
    def _rates_in_range(cls, v):
        for key, rate in v.items():
            if rate is not None and not 0.0 <= rate <= 100.0:
                raise ValueError(f"{key}={rate} is outside [0, 100]")
        return v

    @property
    def sort_key(self) -> Tuple[str, str, str, int]:
        return (self.source, self.attack, self.target, self.seed)

    def row(self) -> Dict[str, Any]:
        return {
            "source": self.source,
            "target": self.target,
            "attack": self.attack,
            "seed": self.seed,
            "white_box": self.white_box,
            **self.metrics,
        }


def retrieval_metrics(index: RetrievalIndex, prefix: str = "") -> Dict[str, float]:
    out = {}
    for direction in ("TR", "IR"):
        ranks = query_ranks(index, direction)
        for k in KS:
            if k <= index.gallery_size(direction):
                out[f"{prefix}{direction.lower()}_r{k}"] = float(100.0 * np.mean(ranks < k))
    return out


def evaluate_transfer(
    target: EncoderPair,
    dataset: ShapeCaptionDataset,
    adversarial: Mapping[int, Any],
    source: str,
    attack: str,
    seed: int,
    budget=None,
    split: str = "test",
    clean_index: Optional[RetrievalIndex] = None,
) -> TransferReport:
    """
    `adversarial` maps pair_id -> AttackOutcome-like objects (v_adv, t_adv). Every
    image and caption of the split is replaced, both directions are scored.
    """
    budget = coerce(AttackBudget, budget)
    clean = clean_index or build_index(target, dataset, split)
    missing = [pid for pid in clean.pair_ids if pid not in adversarial]
    if missing:
        raise ShapeMismatchError(f"no adversarial example for {len(missing)} pair(s) of the '{split}' split, e.g. {missing[:3]}")
    adv = build_index(
        target,
        dataset,
        split,
        images={pid: adversarial[pid].v_adv for pid in clean.pair_ids},
        captions={pid: adversarial[pid].t_adv for pid in clean.pair_ids},
    )

    metrics: Dict[str, Optional[float]] = {}
    metrics.update(retrieval_metrics(clean, "clean_"))
    metrics.update(retrieval_metrics(adv, "adv_"))
    ranks = {d: (query_ranks(clean, d), query_ranks(adv, d)) for d in ("TR", "IR")}
    for d, (rc, ra) in ranks.items():
        for k in KS:
            if k <= clean.gallery_size(d):
                metrics[f"{d.lower()}_asr{k}"] = success_rate_from_ranks(rc, ra, k)

    per_pair = []
    ir_clean, ir_adv = ranks["IR"]
    for row, pid in enumerate(clean.pair_ids):
        item = dataset.get(pid)
        outcome = adversarial[pid]
        cols = np.nonzero(clean.text_owner == row)[0]
        per_pair.append(
            PairRecord(
                pair_id=pid,
                tr_rank_clean=int(ranks["TR"][0][row]),
                tr_rank_adv=int(ranks["TR"][1][row]),
                ir_ranks_clean=[int(ir_clean[j]) for j in cols],
                ir_ranks_adv=[int(ir_adv[j]) for j in cols],
                linf=float(np.max(np.abs(np.asarray(outcome.v_adv, dtype=np.float64) - np.asarray(item.image, dtype=np.float64)))),
                captions_changed=sum(a.ids != b.ids for a, b in zip(item.captions, outcome.t_adv)),
            )
        )

    return TransferReport(
        source=source,
        target=target.tag,
        attack=attack,
        seed=seed,
        white_box=source == target.tag,
        budget=budget.model_dump(mode="json"),
        metrics=metrics,
        per_pair=per_pair,
    )


def baseline_metrics(pair: EncoderPair, dataset: ShapeCaptionDataset, split: str = "test") -> Dict[str, Any]:
    return {"model": pair.tag, **retrieval_metrics(build_index(pair, dataset, split))}


def transfer_matrix(
    models: Sequence[EncoderPair],
    attacks: Sequence[str],
    dataset: ShapeCaptionDataset,
    budget,
    seeds: Sequence[int] = (0,),
    sources: Optional[Sequence[str]] = None,
    workers: int = 1,
    split: str = "test",
) -> List[TransferReport]:
    """
    Craft once per (source, attack, seed) on the source model, then score the same
    adversarial pairs on every model. Reports come back sorted, not in completion order.
    """
    if len(models) < 2:
        raise ConfigError(f"a transfer matrix needs at least 2 models, got {len(models)}")
    by_tag = {m.tag: m for m in models}
    sources = list(sources) if sources else [m.tag for m in models]
    clean = {tag: build_index(m, dataset, split) for tag, m in by_tag.items()}

    reports = []
    for seed in seeds:
        for src in sources:
            if src not in by_tag:
                raise ConfigError(f"unknown source model '{src}'")
            for attack in attacks:
                crafted = craft_adversarial(attack, by_tag[src], dataset, budget, seed=seed, workers=workers, split=split)
                for tag, target in by_tag.items():
                    reports.append(
                        evaluate_transfer(target, dataset, crafted, src, attack, seed, budget, split, clean_index=clean[tag])
                    )
    return sorted(reports, key=lambda r: r.sort_key)


def reports_frame(reports: Sequence[TransferReport]) -> pd.DataFrame:
    """flat table, one row per report, sorted by (source, attack, target, seed)"""
    rows = [r.row() for r in sorted(reports, key=lambda r: r.sort_key)]
    if not rows:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    return pd.DataFrame(rows)
