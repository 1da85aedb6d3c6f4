"""Training loops: frozen-embedding heads, end-to-end classifiers, de novo pre-training, multi-task fine-tuning"""

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .chem import Peptide, parse_peptide
from .config import EncoderConfig, MultitaskConfig, PreprocessConfig, TrainConfig
from .denovo import DenovoModel
from .encoder import PeakBatch, SpectrumEncoder, collate
from .errors import ConfigError, DegenerateValidation, EmptySpectrum, NumericError
from .heads import AdamState, DenseHead, EarlyStopping, adam_step, bce_smoothed, make_scheduler
from .metrics import auroc
from .ms_io import Spectrum
from .preprocess import ProcessedSpectrum, preprocess_spectrum
from .schemas import ValidationEvent

logger = logging.getLogger(__name__)

DOWNSTREAM_TASKS = ("quality", "chimera", "phospho")
LOG_HEADER = "step\ttask\tsplit\tloss\tauroc"

EventSink = Callable[[ValidationEvent], None]


# Datasets


def preprocess_all(
    spectra: Sequence[Spectrum], preprocess_cfg: Optional[PreprocessConfig]
) -> Tuple[List[ProcessedSpectrum], List[int]]:
    processed, kept = [], []
    for i, s in enumerate(spectra):
        try:
            processed.append(preprocess_spectrum(s, preprocess_cfg))
        except EmptySpectrum:
            logger.warning(f"Dropping spectrum {s.run_id}/{s.scan_id}: no peaks after preprocessing")
            continue
        kept.append(i)
    return processed, kept


@dataclass
class TaskData:
    """Preprocessed spectra with binary labels for one classification task"""

    spectra: List[ProcessedSpectrum]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.spectra) != self.labels.size:
            raise ConfigError(f"{len(self.spectra)} spectra but {self.labels.size} labels")

    def __len__(self) -> int:
        return len(self.spectra)

    @classmethod
    def build(
        cls, spectra: Sequence[Spectrum], labels: Sequence[int], preprocess_cfg: Optional[PreprocessConfig] = None
    ) -> "TaskData":
        processed, kept = preprocess_all(spectra, preprocess_cfg)
        return cls(processed, np.asarray(labels, dtype=np.int64)[kept])

    def subset(self, indices: Sequence[int]) -> "TaskData":
        return TaskData([self.spectra[i] for i in indices], self.labels[np.asarray(indices, dtype=np.int64)])


@dataclass
class DenovoData:
    """Preprocessed spectra paired with their peptide sequences"""

    spectra: List[ProcessedSpectrum]
    peptides: List[Peptide]

    def __len__(self) -> int:
        return len(self.spectra)

    @classmethod
    def build(cls, spectra: Sequence[Spectrum], preprocess_cfg: Optional[PreprocessConfig] = None) -> "DenovoData":
        annotated = [s for s in spectra if s.peptide is not None]
        if len(annotated) < len(spectra):
            logger.warning(f"Dropping {len(spectra) - len(annotated)} spectra without a peptide annotation")
        processed, kept = preprocess_all(annotated, preprocess_cfg)
        return cls(processed, [parse_peptide(annotated[i].peptide) for i in kept])


class CyclingLoader:
    """Endless shuffled mini-batches of indices; reshuffles after every pass"""

    def __init__(self, n: int, batch_size: int, seed: int, name: str = "dataset"):
        if n == 0:
            raise ConfigError(f"Training data for {name} is empty")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.generator = torch.Generator().manual_seed(seed)
        self._order: List[int] = []
        self.epoch = 0

    def __iter__(self) -> Iterator[List[int]]:
        return self

    def __next__(self) -> List[int]:
        if len(self._order) < self.batch_size:
            self._order = torch.randperm(self.n, generator=self.generator).tolist()
            self.epoch += 1
        batch, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return batch


def _batches(n: int, batch_size: int, generator: Optional[torch.Generator] = None) -> Iterator[List[int]]:
    order = torch.randperm(n, generator=generator).tolist() if generator is not None else list(range(n))
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_validation(labels: np.ndarray) -> None:
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0 or n_pos == labels.size:
        raise DegenerateValidation(f"Validation labels hold a single class ({n_pos} of {labels.size} positive)")


# Frozen-embedding heads


@dataclass
class HeadResult:
    head: DenseHead
    best_auroc: float
    best_epoch: int
    stopped_epoch: int
    history: List[float] = field(default_factory=list)


def predict_head(head: DenseHead, embeddings: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Sigmoid probabilities for each embedding row"""
    dtype = next(head.parameters()).dtype
    x = torch.as_tensor(np.asarray(embeddings), dtype=dtype)
    was_training = head.training
    head.eval()
    with torch.no_grad():
        probs = [torch.sigmoid(head(x[i : i + batch_size])) for i in range(0, x.shape[0], batch_size)]
    head.train(was_training)
    if not probs:
        return np.zeros(0, dtype=np.float64)
    return torch.cat(probs).to(torch.float64).numpy()


def train_head(
    train_emb: np.ndarray,
    train_labels: Sequence[int],
    valid_emb: np.ndarray,
    valid_labels: Sequence[int],
    cfg: Optional[TrainConfig] = None,
    hidden_dim: Optional[int] = None,
) -> HeadResult:
    """Fit a dense head on frozen embeddings, early stopping on validation AUROC

    Args:
        train_emb: (n, d) training embeddings
        train_labels: 0/1 labels for train_emb rows
        valid_emb: (m, d) validation embeddings
        valid_labels: 0/1 labels with both classes present
        cfg: optimizer and stopping parameters
        hidden_dim: hidden width, defaults to cfg.hidden_dim or d

    Returns:
        HeadResult holding the best-validation-AUROC snapshot
    """
    cfg = cfg or TrainConfig()
    train_y = np.asarray(train_labels, dtype=np.int64)
    valid_y = np.asarray(valid_labels, dtype=np.int64)
    _check_validation(valid_y)
    for name, emb in (("training", train_emb), ("validation", valid_emb)):
        if not np.all(np.isfinite(emb)):
            raise NumericError(f"Non-finite values in {name} embeddings")

    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    x = torch.as_tensor(np.asarray(train_emb), dtype=torch.float32)
    y = torch.as_tensor(train_y, dtype=torch.float32)
    head = DenseHead(x.shape[1], hidden_dim or cfg.hidden_dim)
    state = AdamState(head.named_parameters(), cfg.lr, cfg.weight_decay)
    scheduler = make_scheduler(state, cfg.warmup_steps, cfg.cosine_half_period)
    stopping = EarlyStopping(cfg.patience_epochs)

    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        head.train()
        for batch in _batches(x.shape[0], cfg.batch_size, generator):
            state.zero_grad()
            loss = bce_smoothed(head(x[batch]), y[batch], cfg.label_smoothing)
            loss.backward()
            adam_step(state)
            scheduler.step()
        score = auroc(predict_head(head, valid_emb), valid_y)
        logger.debug(f"head epoch {epoch}: validation auroc {score:.4f}")
        if stopping.update(epoch, score, head):
            logger.info(f"Early stopping at epoch {epoch}; best epoch {stopping.best_epoch}")
            break
    stopping.restore(head)
    logger.info(f"Head training finished: best validation auroc {stopping.best_score:.4f} at epoch {stopping.best_epoch}")
    return HeadResult(head, stopping.best_score, stopping.best_epoch, epoch, stopping.history)


# End-to-end classifiers


class SpectrumClassifier(nn.Module):
    """Spectrum encoder followed by a dense head on the pooled embedding"""

    def __init__(self, encoder: SpectrumEncoder, head: DenseHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, batch: PeakBatch) -> torch.Tensor:
        _, pooled = self.encoder(batch)
        return self.head(pooled)


def predict_spectra(
    encoder: SpectrumEncoder, head: DenseHead, spectra: Sequence[ProcessedSpectrum], batch_size: int = 64
) -> np.ndarray:
    model = SpectrumClassifier(encoder, head)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(spectra), batch_size):
            batch = collate(spectra[start : start + batch_size], dtype=dtype)
            scores.append(torch.sigmoid(model(batch)).to(torch.float64))
    model.train(was_training)
    return torch.cat(scores).numpy() if scores else np.zeros(0, dtype=np.float64)


@dataclass
class EndToEndResult:
    encoder: SpectrumEncoder
    head: DenseHead
    best_auroc: float
    best_epoch: int
    n_layers: int
    sweep: Dict[int, float] = field(default_factory=dict)


def select_layer_count(scores: Mapping[int, float]) -> int:
    """Layer count with the highest validation AUROC; ties go to the smaller count"""
    if not scores:
        raise ConfigError("Layer sweep produced no scores")
    return min(scores, key=lambda n: (-scores[n], n))


def _fit_end_to_end(
    train: TaskData,
    valid: TaskData,
    encoder_cfg: EncoderConfig,
    cfg: TrainConfig,
    freeze_encoder: bool,
    hidden_dim: Optional[int],
) -> EndToEndResult:
    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    encoder = SpectrumEncoder(encoder_cfg)
    head = DenseHead(encoder.d_model, hidden_dim or cfg.hidden_dim)
    model = SpectrumClassifier(encoder, head)
    if freeze_encoder:
        encoder.requires_grad_(False)
    state = AdamState(model.named_parameters(), cfg.lr, cfg.weight_decay)
    scheduler = make_scheduler(state, cfg.warmup_steps, cfg.cosine_half_period)
    stopping = EarlyStopping(cfg.patience_epochs)
    labels = torch.as_tensor(train.labels, dtype=torch.float32)

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        for batch in _batches(len(train), cfg.batch_size, generator):
            state.zero_grad()
            logits = model(collate([train.spectra[i] for i in batch]))
            loss = bce_smoothed(logits, labels[batch], cfg.label_smoothing)
            loss.backward()
            adam_step(state)
            scheduler.step()
        score = auroc(predict_spectra(encoder, head, valid.spectra, cfg.batch_size), valid.labels)
        logger.info(f"e2e ({encoder_cfg.n_layers} layers) epoch {epoch}: validation auroc {score:.4f}")
        if stopping.update(epoch, score, model):
            break
    stopping.restore(model)
    return EndToEndResult(encoder, head, stopping.best_score, stopping.best_epoch, encoder_cfg.n_layers)


def train_end_to_end(
    train: TaskData,
    valid: TaskData,
    encoder_cfg: Optional[EncoderConfig] = None,
    cfg: Optional[TrainConfig] = None,
    freeze_encoder: bool = False,
    hidden_dim: Optional[int] = None,
) -> EndToEndResult:
    """Train an encoder and head jointly from scratch

    With cfg.layer_sweep set, one model is trained per layer count and the one
    with the best validation AUROC is returned. freeze_encoder keeps the random
    encoder fixed and trains only the head.
    """
    encoder_cfg = encoder_cfg or EncoderConfig()
    cfg = cfg or TrainConfig(lr=1e-4)
    _check_validation(valid.labels)
    if not cfg.layer_sweep:
        return _fit_end_to_end(train, valid, encoder_cfg, cfg, freeze_encoder, hidden_dim)

    results: Dict[int, EndToEndResult] = {}
    for n_layers in cfg.layer_sweep:
        layer_cfg = encoder_cfg.model_copy(update={"n_layers": n_layers})
        results[n_layers] = _fit_end_to_end(train, valid, layer_cfg, cfg, freeze_encoder, hidden_dim)
    sweep = {n: r.best_auroc for n, r in results.items()}
    chosen = select_layer_count(sweep)
    logger.info(f"Layer sweep {sweep}: selected {chosen} layers")
    best = results[chosen]
    best.sweep = sweep
    return best


# De novo pre-training


@dataclass
class PretrainResult:
    model: DenovoModel
    best_step: int
    best_loss: float
    events: List[ValidationEvent] = field(default_factory=list)


def denovo_loss(model: DenovoModel, data: DenovoData, indices: Sequence[int]) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    batch = collate([data.spectra[i] for i in indices], dtype=dtype)
    return model.loss(batch, [data.peptides[i] for i in indices])


def _mean_denovo_loss(model: DenovoModel, data: DenovoData, batch_size: int) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for batch in _batches(len(data), batch_size):
            total += float(denovo_loss(model, data, batch)) * len(batch)
    model.train()
    return total / len(data)


def pretrain_denovo(
    model: DenovoModel,
    train: DenovoData,
    valid: Optional[DenovoData] = None,
    cfg: Optional[TrainConfig] = None,
    on_event: Optional[EventSink] = None,
) -> PretrainResult:
    """Step-based sequencing pre-training with warmup and cosine decay

    Validation runs every cfg.validate_every steps and at the final step; the
    lowest-validation-loss state is restored at the end. Without validation data
    the final state is kept.
    """
    cfg = cfg or TrainConfig(lr=5e-4, label_smoothing=0.0)
    torch.manual_seed(cfg.seed)
    loader = CyclingLoader(len(train), cfg.batch_size, cfg.seed, "denovo")
    state = AdamState(model.named_parameters(), cfg.lr, cfg.weight_decay)
    scheduler = make_scheduler(state, cfg.warmup_steps, cfg.cosine_half_period)
    events: List[ValidationEvent] = []
    best_loss, best_step, best_state = math.inf, cfg.max_steps, None

    model.train()
    for step in range(1, cfg.max_steps + 1):
        state.zero_grad()
        loss = denovo_loss(model, train, next(loader))
        loss.backward()
        adam_step(state)
        scheduler.step()
        logger.debug(f"pretrain step {step}: loss {float(loss):.4f}")
        if valid is not None and len(valid) and (step % cfg.validate_every == 0 or step == cfg.max_steps):
            valid_loss = _mean_denovo_loss(model, valid, cfg.batch_size)
            event = ValidationEvent(step=step, task="denovo", split="valid", loss=valid_loss)
            events.append(event)
            if on_event:
                on_event(event)
            logger.info(f"pretrain step {step}: train loss {float(loss):.4f}, validation loss {valid_loss:.4f}")
            if valid_loss < best_loss:
                best_loss, best_step = valid_loss, step
                best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    return PretrainResult(model, best_step, best_loss, events)


# Multi-task fine-tuning


@dataclass
class MultitaskResult:
    model: DenovoModel
    heads: Dict[str, DenseHead]
    selected_step: int
    selected_loss: float
    initial_loss: float
    events: List[ValidationEvent] = field(default_factory=list)


def task_weights(cfg: MultitaskConfig) -> Dict[str, float]:
    return {
        "quality": cfg.weight_quality,
        "chimera": cfg.weight_chimera,
        "phospho": cfg.weight_phospho,
        "denovo": cfg.weight_denovo,
    }


def downsample(data: TaskData, factor: int, seed: int) -> TaskData:
    """Seeded random 1/factor subset"""
    if factor <= 1:
        return data
    keep = max(1, math.ceil(len(data) / factor))
    order = np.random.default_rng(seed).permutation(len(data))[:keep]
    return data.subset(np.sort(order))


def multitask_step_losses(
    model: DenovoModel,
    heads: Mapping[str, DenseHead],
    task_batches: Mapping[str, Tuple[List[ProcessedSpectrum], np.ndarray]],
    denovo_batch: Tuple[List[ProcessedSpectrum], List[Peptide]],
    weights: Mapping[str, float],
    label_smoothing: float = 0.0,
) -> Dict[str, torch.Tensor]:
    """The four per-batch losses and their weighted sum under key "total"

    Each downstream task batch passes through the shared encoder into its own head;
    the de novo batch goes through the encoder and decoder.
    """
    dtype = next(model.parameters()).dtype
    losses: Dict[str, torch.Tensor] = {}
    for task, (spectra, labels) in task_batches.items():
        _, pooled = model.encoder(collate(spectra, dtype=dtype))
        target = torch.as_tensor(np.asarray(labels), dtype=dtype)
        losses[task] = bce_smoothed(heads[task](pooled), target, label_smoothing)
    spectra, peptides = denovo_batch
    losses["denovo"] = model.loss(collate(spectra, dtype=dtype), peptides)
    losses["total"] = sum(weights.get(name, 1.0) * loss for name, loss in losses.items())
    return losses


def _validate_tasks(
    model: DenovoModel, heads: Mapping[str, DenseHead], valid: Mapping[str, TaskData], batch_size: int
) -> Dict[str, Tuple[float, Optional[float]]]:
    results = {}
    model.eval()
    for head in heads.values():
        head.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for task, data in valid.items():
            logits = []
            for batch in _batches(len(data), batch_size):
                _, pooled = model.encoder(collate([data.spectra[i] for i in batch], dtype=dtype))
                logits.append(heads[task](pooled))
            stacked = torch.cat(logits)
            labels = torch.as_tensor(data.labels, dtype=dtype)
            loss = float(bce_smoothed(stacked, labels, 0.0))
            score = auroc(torch.sigmoid(stacked).to(torch.float64).numpy(), data.labels)
            results[task] = (loss, score)
    model.train()
    for head in heads.values():
        head.train()
    return results


def finetune_multitask(
    model: DenovoModel,
    train: Mapping[str, TaskData],
    valid: Mapping[str, TaskData],
    denovo_train: DenovoData,
    denovo_valid: Optional[DenovoData] = None,
    cfg: Optional[MultitaskConfig] = None,
    heads: Optional[Mapping[str, DenseHead]] = None,
    on_event: Optional[EventSink] = None,
) -> MultitaskResult:
    """Jointly fine-tune the shared encoder, one head per task and the de novo decoder

    Every step draws one batch from each task's independently shuffled cycling
    loader and minimizes the weighted sum of the three BCE losses and the de novo
    cross-entropy. Validation runs at step 0, every cfg.validate_every steps and at
    the final step; the state with the lowest mean downstream validation loss wins.

    Args:
        model: pre-trained (or fresh) encoder-decoder
        train: task name -> training data, for quality, chimera and phospho
        valid: task name -> validation data (both classes present)
        denovo_train: peptide-annotated spectra for the sequencing loss
        denovo_valid: optional, logged but not used for selection
        cfg: schedule, weights and downsampling
        heads: initial heads; fresh ones are created when absent

    Returns:
        MultitaskResult with the selected model state and heads
    """
    cfg = cfg or MultitaskConfig()
    missing = [t for t in DOWNSTREAM_TASKS if t not in train or t not in valid]
    if missing:
        raise ConfigError(f"Multi-task fine-tuning needs data for {', '.join(missing)}")
    for task in DOWNSTREAM_TASKS:
        _check_validation(valid[task].labels)

    torch.manual_seed(cfg.seed)
    train = dict(train)
    train["phospho"] = downsample(train["phospho"], cfg.phospho_downsample, cfg.seed)
    if heads is None:
        heads = {t: DenseHead(model.encoder.d_model, cfg.hidden_dim) for t in DOWNSTREAM_TASKS}
    heads = nn.ModuleDict({t: heads[t] for t in DOWNSTREAM_TASKS})
    loaders = {t: CyclingLoader(len(train[t]), cfg.batch_size, cfg.seed + i, t) for i, t in enumerate(DOWNSTREAM_TASKS)}
    denovo_loader = CyclingLoader(len(denovo_train), cfg.batch_size, cfg.seed + len(DOWNSTREAM_TASKS), "denovo")
    weights = task_weights(cfg)

    named = [(f"model.{n}", p) for n, p in model.named_parameters()]
    named += [(f"heads.{n}", p) for n, p in heads.named_parameters()]
    state = AdamState(named, cfg.lr, cfg.weight_decay)
    scheduler = make_scheduler(state, cfg.warmup_steps, cfg.cosine_half_period)
    events: List[ValidationEvent] = []

    def validate(step: int) -> float:
        results = _validate_tasks(model, heads, {t: valid[t] for t in DOWNSTREAM_TASKS}, cfg.batch_size)
        new_events = [
            ValidationEvent(step=step, task=task, split="valid", loss=loss, auroc=score)
            for task, (loss, score) in results.items()
        ]
        if denovo_valid is not None and len(denovo_valid):
            loss = _mean_denovo_loss(model, denovo_valid, cfg.batch_size)
            new_events.append(ValidationEvent(step=step, task="denovo", split="valid", loss=loss))
        events.extend(new_events)
        if on_event:
            for event in new_events:
                on_event(event)
        mean_loss = float(np.mean([loss for loss, _ in results.values()]))
        logger.info(f"multitask step {step}: mean downstream validation loss {mean_loss:.4f}")
        return mean_loss

    def snapshot():
        return copy.deepcopy(model.state_dict()), copy.deepcopy(heads.state_dict())

    initial_loss = validate(0)
    best_loss, best_step = initial_loss, 0
    best_model_state, best_heads_state = snapshot()

    model.train()
    for step in range(1, cfg.max_steps + 1):
        task_batches = {}
        for task in DOWNSTREAM_TASKS:
            indices = next(loaders[task])
            data = train[task]
            task_batches[task] = ([data.spectra[i] for i in indices], data.labels[indices])
        denovo_indices = next(denovo_loader)
        denovo_batch = (
            [denovo_train.spectra[i] for i in denovo_indices],
            [denovo_train.peptides[i] for i in denovo_indices],
        )
        state.zero_grad()
        losses = multitask_step_losses(model, heads, task_batches, denovo_batch, weights, cfg.label_smoothing)
        losses["total"].backward()
        adam_step(state)
        scheduler.step()
        logger.debug(
            f"multitask step {step}: " + ", ".join(f"{name}={float(value):.4f}" for name, value in losses.items())
        )
        if step % cfg.validate_every == 0 or step == cfg.max_steps:
            mean_loss = validate(step)
            if mean_loss < best_loss:
                best_loss, best_step = mean_loss, step
                best_model_state, best_heads_state = snapshot()

    model.load_state_dict(best_model_state)
    heads.load_state_dict(best_heads_state)
    logger.info(f"Selected multitask checkpoint at step {best_step} (mean validation loss {best_loss:.4f})")
    return MultitaskResult(model, dict(heads.items()), best_step, best_loss, initial_loss, events)


def write_training_log(events: Sequence[ValidationEvent]) -> str:
    """Training log TSV: one line per validation event"""
    return "\n".join([LOG_HEADER] + [e.to_tsv() for e in events]) + "\n"
