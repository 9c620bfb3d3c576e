"""
Image attack (momentum sign ascent over shuffled copies), sample-weighted
single-word text attack, and the named attack pipelines.

Images are attacked in float64; the encoder sees a cast copy, so the L-inf
projection is exact to float64 rounding.
"""

import concurrent.futures
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.metrics.pairwise import cosine_similarity
from tqdm import tqdm

from lssa_lab.config import PIPELINE_NAMES, AttackBudget, coerce
from lssa_lab.data import TokenSequence, Vocabulary
from lssa_lab.errors import (
    ConfigError,
    EmptyInputError,
    NumericalError,
    ShapeMismatchError,
    UnknownPipelineError,
)
from lssa_lab.models import DEFAULT_LOSS, EncoderPair, LossSpec, input_gradients, loss
from lssa_lab.seeds import derive_seed, torch_generator
from lssa_lab.transforms import copy_transforms, sample_neighbors

logger = logging.getLogger(__name__)

BUDGET_TOL = 1e-9


# ---------------------------
# Image attack
# ---------------------------
@dataclass
class MomentumState:
    g: torch.Tensor
    i: int = 0

    @classmethod
    def zeros_like(cls, v: torch.Tensor) -> "MomentumState":
        return cls(g=torch.zeros_like(torch.as_tensor(v, dtype=torch.float64)), i=0)


def momentum_update(state: MomentumState, grads, mu: float) -> MomentumState:
    """g_next = mu * g + mean_j(grad_j / ||grad_j||_1); zero gradients add nothing"""
    grads = list(grads)
    if not grads:
        raise EmptyInputError("momentum_update needs at least one gradient")
    for gr in grads:
        if tuple(gr.shape) != tuple(state.g.shape):
            raise ShapeMismatchError(f"gradient shape {tuple(gr.shape)} != momentum shape {tuple(state.g.shape)}")
    stack = torch.stack([torch.as_tensor(gr).to(state.g.dtype) for gr in grads])
    norms = stack.abs().flatten(1).sum(dim=1)
    norms = torch.where(norms > 0, norms, torch.ones_like(norms))
    normalized = stack / norms.view(-1, *([1] * (stack.dim() - 1)))
    g = mu * state.g + normalized.mean(dim=0)
    if not bool(torch.isfinite(g).all()):
        raise NumericalError(f"non-finite accumulated gradient at iteration {state.i}")
    return MomentumState(g=g, i=state.i + 1)


def ascent_step(v_adv, g, alpha: float, v_orig, eps_v: float) -> torch.Tensor:
    """clamp_[0,1]( project_{eps_v}(v_adv + alpha * sign(g)) )"""
    v_adv, g, v_orig = torch.as_tensor(v_adv), torch.as_tensor(g), torch.as_tensor(v_orig)
    if not (v_adv.shape == g.shape == v_orig.shape):
        raise ShapeMismatchError(f"inconsistent shapes {tuple(v_adv.shape)}, {tuple(g.shape)}, {tuple(v_orig.shape)}")
    step = v_adv + alpha * torch.sign(g)
    step = torch.minimum(torch.maximum(step, v_orig - eps_v), v_orig + eps_v)
    return torch.clamp(step, 0.0, 1.0)


def white_box_loss(pair: EncoderPair, v: torch.Tensor, text_embeddings: torch.Tensor, spec: LossSpec = DEFAULT_LOSS) -> float:
    return float(loss(spec, pair.embed_images(v.unsqueeze(0))[0], text_embeddings))


def image_attack(
    pair: EncoderPair,
    v,
    caption_set,
    budget,
    rng: Optional[torch.Generator] = None,
    kind: str = "local",
    spec: LossSpec = DEFAULT_LOSS,
) -> Tuple[torch.Tensor, List[float]]:
    """
    T iterations of: draw N shuffled copies of the current iterate, per-copy gradients
    against the caption set, momentum update, sign ascent. N=0 uses the iterate itself.
    Returns (v_adv, trace) where trace[i] is the white-box loss at iterate i (T+1 values).
    """
    budget = coerce(AttackBudget, budget)
    v0 = torch.as_tensor(v).to(torch.float64)
    if tuple(v0.shape) != pair.image_shape:
        raise ShapeMismatchError(f"image shape {tuple(v0.shape)} does not match model input {pair.image_shape}")
    text = caption_set if torch.is_tensor(caption_set) else pair.embed_texts(list(caption_set))
    if text.shape[0] == 0:
        raise EmptyInputError("image attack needs at least one caption")
    rng = rng if rng is not None else torch_generator(0)

    state = MomentumState.zeros_like(v0)
    v_adv = v0.clone()
    trace = [white_box_loss(pair, v_adv, text, spec)]
    for i in range(budget.steps):
        transforms = copy_transforms(budget.shuffle, rng, kind)
        try:
            grads, _ = input_gradients(pair, v_adv, text, transforms, spec)
            state = momentum_update(state, grads.unbind(0), budget.momentum)
        except NumericalError as e:
            raise type(e)(f"{e.detail} (image attack iteration {i})") from e
        v_adv = ascent_step(v_adv, state.g, budget.alpha, v0, budget.eps_v)
        trace.append(white_box_loss(pair, v_adv, text, spec))
    return v_adv, trace


# ---------------------------
# Text attack
# ---------------------------
def text_candidates(
    vocab: Vocabulary, t: TokenSequence, position: int, W: int, token_table: Optional[np.ndarray] = None
) -> List[TokenSequence]:
    """
    Up to W single-word substitutes at `position`, drawn from the token's grammar class
    (itself excluded), nearest first in the token-embedding space when a table is given.
    """
    if not 0 <= position < len(t):
        raise ConfigError(f"position {position} is outside a caption of length {len(t)}", code="invalid_position")
    if W < 1:
        raise ConfigError(f"W must be >= 1, got {W}")
    orig = t.ids[position]
    members = [m for m in vocab.class_members(orig) if m != orig]
    if not members:
        return []
    if token_table is not None:
        sims = cosine_similarity(token_table[[orig]], token_table[members])[0]
        order = sorted(range(len(members)), key=lambda j: (-sims[j], members[j]))
        members = [members[j] for j in order]
    return [vocab.replace(t, position, m) for m in members[:W]]


def _objective_images(v_orig, neighbors: Sequence, lam: float) -> torch.Tensor:
    images = [torch.as_tensor(v_orig)]
    if lam < 1:
        images += [torch.as_tensor(n) for n in neighbors]
    return torch.stack([x.to(torch.float64) for x in images])


def _mixture(j: torch.Tensor, lam: float) -> float:
    if lam >= 1:
        return float(j[0])
    return float(lam * j[0] + (1.0 - lam) * j[1:].mean())


def _score(pair, t: TokenSequence, image_embeddings: torch.Tensor, lam: float, spec: LossSpec) -> float:
    e_t = pair.embed_texts([t])
    return _mixture(loss(spec, image_embeddings, e_t), lam)


def text_objective(pair, t_candidate: TokenSequence, v_orig, neighbors: Sequence, lam: float, spec: LossSpec = DEFAULT_LOSS) -> float:
    """lam * J(v_orig, t') + (1 - lam) * mean_i J(v_i, t')"""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lam must lie in [0, 1], got {lam}")
    if lam < 1 and len(neighbors) == 0:
        raise EmptyInputError("text objective with lam < 1 needs at least one neighbor")
    image_embeddings = pair.embed_images(_objective_images(v_orig, neighbors, lam))
    return _score(pair, t_candidate, image_embeddings, lam, spec)


def text_neighbors(v_adv, budget: AttackBudget, rng: torch.Generator) -> List[torch.Tensor]:
    """M sampled neighbors of v_adv; M=0 with lam<1 falls back to {v_adv}"""
    if budget.lam >= 1:
        return []
    return sample_neighbors(v_adv, budget.sample, rng) or [torch.as_tensor(v_adv)]


def text_search(
    pair, v_orig, v_adv, t: TokenSequence, budget, rng: Optional[torch.Generator] = None, spec: LossSpec = DEFAULT_LOSS
) -> Tuple[TokenSequence, float]:
    """exhaustive argmax of the text objective over B[t, 1]; returns (t_adv, objective)"""
    budget = coerce(AttackBudget, budget)
    rng = rng if rng is not None else torch_generator(0)
    neighbors = text_neighbors(v_adv, budget, rng)
    image_embeddings = pair.embed_images(_objective_images(v_orig, neighbors, budget.lam))

    best_t = t
    best = _score(pair, t, image_embeddings, budget.lam, spec)
    if budget.eps_t == 0:
        return best_t, best
    table = pair.token_embeddings()
    for pos in range(len(t)):
        candidates = text_candidates(pair_vocabulary(pair), t, pos, budget.num_candidates, table)
        for cand in sorted(candidates, key=lambda c: c.ids[pos]):
            s = _score(pair, cand, image_embeddings, budget.lam, spec)
            if s > best:
                best_t, best = cand, s
    return best_t, best


def text_attack(pair, v_orig, v_adv, t: TokenSequence, budget, rng: Optional[torch.Generator] = None, spec: LossSpec = DEFAULT_LOSS) -> TokenSequence:
    return text_search(pair, v_orig, v_adv, t, budget, rng, spec)[0]


def pair_vocabulary(pair) -> Vocabulary:
    vocab = getattr(pair, "vocabulary", None)
    if vocab is None:
        raise ConfigError(f"model '{getattr(pair, 'tag', '?')}' has no vocabulary attached for the text attack")
    return vocab


# ---------------------------
# Outcomes
# ---------------------------
def word_distance(a: TokenSequence, b: TokenSequence) -> int:
    if len(a) != len(b):
        return max(len(a), len(b))
    return sum(x != y for x, y in zip(a.ids, b.ids))


@dataclass
class AttackOutcome:
    pipeline: str
    pair_id: int
    v_adv: torch.Tensor
    t_adv: Tuple[TokenSequence, ...]
    trace: List[float] = field(default_factory=list)
    seeds: Dict[str, int] = field(default_factory=dict)

    def check(self, v, t_set: Sequence[TokenSequence], eps_v: float, eps_t: int) -> None:
        """raises NumericalError when the outcome leaves the budget"""
        v = torch.as_tensor(v).to(torch.float64)
        linf = float((self.v_adv - v).abs().max()) if v.numel() else 0.0
        if linf > eps_v + BUDGET_TOL:
            raise NumericalError(f"pair {self.pair_id} ({self.pipeline}): L-inf {linf:.3e} exceeds eps_v {eps_v:.3e}", code="budget_violation")
        if float(self.v_adv.min()) < 0.0 or float(self.v_adv.max()) > 1.0:
            raise NumericalError(f"pair {self.pair_id} ({self.pipeline}): adversarial image leaves [0, 1]", code="budget_violation")
        for orig, adv in zip(t_set, self.t_adv):
            if word_distance(orig, adv) > eps_t:
                raise NumericalError(f"pair {self.pair_id} ({self.pipeline}): '{adv.text}' changes more than {eps_t} word(s)", code="budget_violation")


# ---------------------------
# Pipelines
# ---------------------------
@dataclass
class _Stages:
    """stage runners bound to one (model, pair, seed)"""

    pair: EncoderPair
    v: torch.Tensor
    captions: Tuple[TokenSequence, ...]
    budget: AttackBudget
    seed: int
    pipeline: str
    pair_id: int
    seeds: Dict[str, int] = field(default_factory=dict)

    def _rng(self, *stage) -> torch.Generator:
        s = derive_seed(self.seed, "attack", self.pipeline, self.pair_id, *stage)
        self.seeds["/".join(str(x) for x in stage)] = s
        return torch_generator(s)

    def guide(self, captions: Sequence[TokenSequence]) -> torch.Tensor:
        return self.pair.embed_texts(list(captions)[: self.budget.caption_set_size])

    def image(self, captions, kind: str = "local", **changes) -> Tuple[torch.Tensor, List[float]]:
        b = self.budget.with_updates(**changes)
        return image_attack(self.pair, self.v, self.guide(captions), b, self._rng("image"), kind)

    def text(self, v_adv: torch.Tensor, stage: str, **changes) -> Tuple[TokenSequence, ...]:
        b = self.budget.with_updates(**changes)
        return tuple(
            text_attack(self.pair, self.v, v_adv, t, b, self._rng(stage, ci)) for ci, t in enumerate(self.captions)
        )


def _pgd(s: _Stages):
    v_adv, trace = s.image(s.captions, N=0, momentum=0.0, resize=False)
    return v_adv, s.captions, trace


def _mifgsm(s: _Stages):
    v_adv, trace = s.image(s.captions, N=0, resize=False)
    return v_adv, s.captions, trace


def _sep(s: _Stages):
    v_adv, trace = s.image(s.captions, N=0, momentum=0.0, resize=False)
    return v_adv, s.text(v_adv, "text", lam=1.0, M=0), trace


def _sga_tit(s: _Stages):
    first = s.text(s.v, "text0", lam=1.0, M=0)
    v_adv, trace = s.image(first, N=0, momentum=0.0)
    return v_adv, s.text(v_adv, "text", lam=0.0, M=0, eps0=0.0), trace


def _sga_it(s: _Stages, shuffled: bool = False, sampled: bool = False, momentum: bool = False, kind: str = "local"):
    changes = {} if momentum else {"momentum": 0.0}
    if not shuffled:
        changes["N"] = 0
    v_adv, trace = s.image(s.captions, kind=kind, **changes)
    if sampled:
        t_adv = s.text(v_adv, "text")
    else:
        t_adv = s.text(v_adv, "text", lam=0.0, M=0, eps0=0.0)
    return v_adv, t_adv, trace


PIPELINES: Dict[str, Callable[[_Stages], Tuple[torch.Tensor, Tuple[TokenSequence, ...], List[float]]]] = {
    "pgd": _pgd,
    "mifgsm": _mifgsm,
    "sep": _sep,
    "sga_tit": _sga_tit,
    "sga_it": _sga_it,
    "sga_it_sampled": lambda s: _sga_it(s, sampled=True),
    "sga_it_shuffled": lambda s: _sga_it(s, shuffled=True),
    "sga_it_sampled_shuffled": lambda s: _sga_it(s, shuffled=True, sampled=True),
    "lssa": lambda s: _sga_it(s, shuffled=True, sampled=True, momentum=True),
    "lssa_global_shuffle": lambda s: _sga_it(s, shuffled=True, sampled=True, momentum=True, kind="global"),
}


def run_pipeline(
    name: str,
    pair: EncoderPair,
    v,
    t_set: Sequence[TokenSequence],
    budget,
    seed: int = 0,
    pair_id: int = 0,
) -> AttackOutcome:
    if name not in PIPELINES:
        raise UnknownPipelineError(f"unknown pipeline '{name}' (known: {', '.join(PIPELINE_NAMES)})")
    budget = coerce(AttackBudget, budget)
    v = torch.as_tensor(v).to(torch.float64)
    captions = tuple(t_set)
    if not captions:
        raise EmptyInputError(f"pair {pair_id} has no captions to attack")

    stages = _Stages(pair=pair, v=v, captions=captions, budget=budget, seed=seed, pipeline=name, pair_id=pair_id)
    v_adv, t_adv, trace = PIPELINES[name](stages)
    outcome = AttackOutcome(pipeline=name, pair_id=pair_id, v_adv=v_adv, t_adv=tuple(t_adv), trace=trace, seeds=stages.seeds)
    outcome.check(v, captions, budget.eps_v, budget.eps_t)
    return outcome


def craft_adversarial(
    name: str,
    pair: EncoderPair,
    dataset,
    budget,
    seed: int = 0,
    workers: int = 1,
    split: str = "test",
    show_progress: bool = False,
) -> Dict[int, AttackOutcome]:
    """run one pipeline over every pair of a split; result keyed by pair_id, sorted"""
    if name not in PIPELINES:
        raise UnknownPipelineError(f"unknown pipeline '{name}' (known: {', '.join(PIPELINE_NAMES)})")
    budget = coerce(AttackBudget, budget)
    items = dataset.split(split)
    logger.info(f"[attack] seed={seed} source={pair.tag} pipeline={name} ({len(items)} pairs)")

    results: Dict[int, AttackOutcome] = {}
    bar = tqdm(total=len(items), desc=f"{name}@{pair.tag}", disable=not show_progress, leave=False)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_pid = {
            executor.submit(run_pipeline, name, pair, it.tensor(), it.captions, budget, seed, it.pair_id): it.pair_id
            for it in items
        }
        for future in concurrent.futures.as_completed(future_to_pid):
            pid = future_to_pid[future]
            try:
                results[pid] = future.result()
            except Exception:
                logger.error(f"[attack] {name} failed on pair {pid}")
                for other in future_to_pid:
                    other.cancel()
                raise
            bar.update(1)
    bar.close()
    return dict(sorted(results.items()))
