"""
Training orchestration for the CLASTER model.

Phases run in a fixed order:
  1. mapper      a(y) -> a'(y), least squares against the visual features, then frozen
  2. clusters    k-means over x ++ a'(y)
  3. classifier  psi mapper + V trained with the semantic softmax loss
  4. rl          REINFORCE centroid updates (full mode only)
  5. finalize    projected unseen embeddings rectified and cached

Phases 3 and 4 may alternate `alternations` times.
"""
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator

from clustering import ClusterModel, assign_all, kmeans_fit, purity
from dataset import holdout_split, normalize_embeddings
from errors import (
    ClasterError, ConfigError, DimensionMismatch, MalformedRecord, NonFiniteLoss,
    NonFiniteValue, NoSeenInstances, PhaseOrderError,
)
from evaluation import per_class_accuracy, summarize_runs
from inference import (
    GateConfig, RectifiedEmbedding, gzsl_predict_batch, nearest_unseen,
    plain_embeddings, rectify_all, tune_tau, zsl_predict_batch,
)
from neural import (
    AdamState, ClassifierParams, MlpParams, adam_step, classifier_forward,
    classifier_gradient, init_classifier, init_mlp, least_squares_loss, load_checkpoint,
    mlp_forward, mlp_gradient, save_checkpoint, semantic_loss, semantic_softmax,
)
from reinforce import RLConfig, format_schedule, reinforce_step, schedule_alpha
from representation import build_psi_batch, claster_gradient, claster_omega, claster_representation
from utils import format_float, get_logger

log = get_logger(__name__)

ABLATION_MODES = ("full", "kmeans_only", "random_clustering", "no_clustering")
PHASES = ("mapper", "clusters", "classifier", "rl", "finalize")


# ── Configuration ──────────────────────────────────────────────────

class AdamConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(5e-4, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)

    def state(self):
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                         eps=self.eps, weight_decay=self.weight_decay)


class DimsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mapper_hidden: Optional[int] = Field(None, ge=1)    # None -> d_v
    psi_hidden: Optional[int] = Field(None, ge=1)       # None -> d_v
    fc_hidden: int = Field(32, ge=1)
    conv_channels: int = Field(4, ge=1)
    kernel_size: int = Field(3, ge=1)

    @field_validator("kernel_size")
    @classmethod
    def _odd(cls, value):
        if value % 2 == 0:
            raise ValueError("kernel size must be odd")
        return value


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    k_clusters: int = Field(6, ge=1)
    mapper_epochs: int = Field(200, ge=0)
    classifier_epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=1)
    lam: float = Field(1e-4, ge=0, alias="lambda")
    psi_align_weight: float = Field(1.0, ge=0)
    adam: AdamConfig = Field(default_factory=AdamConfig)
    rl: RLConfig = Field(default_factory=RLConfig)
    rectify: bool = True
    rectify_k: int = Field(5, ge=1)
    gate: GateConfig = Field(default_factory=GateConfig)
    query: Literal["argmax", "soft", "semantic"] = "argmax"
    soft_query: bool = False
    normalize_embeddings: bool = False
    seed: int = Field(0, ge=0)
    ablation_mode: Literal["full", "kmeans_only", "random_clustering", "no_clustering"] = "full"
    kmeans_init: Literal["plusplus", "forgy", "random_assign"] = "plusplus"
    kmeans_n_init: int = Field(4, ge=1)
    standardize: bool = False
    alternations: int = Field(1, ge=1)
    dims: DimsConfig = Field(default_factory=DimsConfig)

    @field_validator("soft_query")
    @classmethod
    def _soft_needs_seen_query(cls, value, info: ValidationInfo):
        if value and info.data.get("query") == "semantic":
            raise ValueError("soft_query blends seen-class embeddings; it cannot combine with query = semantic")
        return value

    @property
    def query_mode(self):
        """argmax, soft or semantic; soft_query = true means soft."""
        return "soft" if self.soft_query else self.query

    def flat(self):
        """Dotted key -> text value, the inverse of build_config."""
        def _text(value):
            if isinstance(value, bool):
                return "true" if value else "false"
            if isinstance(value, float):
                return format_float(value)
            return str(value)

        result = {}
        for key, value in self.model_dump(by_alias=True).items():
            if isinstance(value, dict):
                for sub, inner in value.items():
                    if inner is None:
                        continue
                    text = format_schedule(inner) if (key, sub) == ("rl", "schedule") else _text(inner)
                    result[f"{key}.{sub}"] = text
            elif value is not None:
                result[key] = _text(value)
        return result


def build_config(values):
    """Validate a flat `dotted.key -> value` mapping into a PipelineConfig."""
    nested = {}
    for key, value in values.items():
        parts = key.strip().split(".")
        if len(parts) > 2 or not all(parts):
            raise ConfigError(f"unknown configuration key '{key}'", key=key)
        if len(parts) == 1:
            if isinstance(nested.get(parts[0]), dict):
                raise ConfigError(f"'{key}' is a section, not a value", key=key)
            nested[parts[0]] = value
            continue
        section = nested.setdefault(parts[0], {})
        if not isinstance(section, dict):
            raise ConfigError(f"'{parts[0]}' is a value, not a section", key=key)
        section[parts[1]] = value
    try:
        return PipelineConfig.model_validate(nested)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid configuration '{key}': {first['msg']}", key=key)


def load_config(path=None, overrides=None):
    """
    Read `key = value` lines (# comments, blank lines ignored) and apply
    overrides on top. Unknown keys are errors.
    """
    values = {}
    if path is not None:
        for number, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{path}: line {number}: expected 'key = value'")
            values[key.strip()] = value.strip()
    values.update(overrides or {})
    return build_config(values)


def with_overrides(config, **changes):
    """Re-validated copy of `config` with the given top-level fields replaced."""
    data = config.model_dump(by_alias=True)
    data.update(changes)
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid configuration '{key}': {first['msg']}", key=key)


# ── Results ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RLProgress:
    iteration: int
    alpha: float
    running_reward_mean: float
    purity: float

    def line(self):
        return f"{self.iteration}\t{format_float(self.alpha)}\t{self.running_reward_mean:.4f}\t{self.purity:.4f}"


@dataclass
class TrainedModel:
    mapper: MlpParams
    psi_mapper: MlpParams
    classifier: ClassifierParams
    clusters: ClusterModel
    embeddings: dict                    # label -> a(y), seen and unseen
    seen_labels: tuple
    unseen_labels: tuple
    rectified: dict                     # unseen label -> RectifiedEmbedding
    config: PipelineConfig
    tau: float
    purity_before: Optional[float] = None
    purity_after: Optional[float] = None

    @property
    def d_v(self):
        return self.psi_mapper.in_dim

    def seen_matrix(self):
        return np.vstack([self.embeddings[label] for label in self.seen_labels])

    def seen_projected(self):
        return mlp_forward(self.mapper, self.seen_matrix())

    def _features(self, features):
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[1] != self.d_v:
            raise DimensionMismatch(
                f"model expects {self.d_v}-dimensional features, data has {features.shape[1]}"
            )
        return features

    def psi(self, features):
        return build_psi_batch(self.psi_mapper, self._features(features))

    def semantic(self, features):
        """V(omega) per row: the computed semantic representation."""
        omega, _ = claster_omega(self.clusters, self.psi(features))
        return classifier_forward(self.classifier, omega)

    def seen_probabilities(self, features):
        return semantic_softmax(self.seen_matrix(), self.semantic(features))

    def psi_assignments(self, features):
        return assign_all(self.clusters, self.psi(features))[0]

    def predict_zsl(self, features):
        mode = self.config.query_mode
        if mode == "semantic":
            return nearest_unseen(self.semantic(features), self.rectified)
        return zsl_predict_batch(
            self.seen_probabilities(features), self.seen_projected(),
            self.rectified, soft_query=mode == "soft",
        )

    def predict_gzsl(self, features, tau=None):
        try:
            gate = GateConfig(tau=self.tau if tau is None else tau)
        except ValidationError as e:
            raise ConfigError(f"invalid gate threshold: {e.errors()[0]['msg']}", key="gate.tau")
        mode = self.config.query_mode
        outputs = self.semantic(features)
        return gzsl_predict_batch(
            semantic_softmax(self.seen_matrix(), outputs), gate, self.seen_labels,
            self.seen_projected(), self.rectified, soft_query=mode == "soft",
            queries=outputs if mode == "semantic" else None,
        )

    # ── Persistence ────────────────────────────────────────────────

    def save(self, path):
        tensors = {
            **self.mapper.tensors("mapper."),
            **self.psi_mapper.tensors("psi_mapper."),
            **self.classifier.tensors("classifier."),
        }
        for centroid in self.clusters.centroids:
            tensors[f"centroid.{centroid.index}"] = centroid.vector
        for label, vector in self.embeddings.items():
            tensors[f"embedding.{label}"] = vector
        for label, entry in self.rectified.items():
            tensors[f"rectified.{label}"] = entry.vector

        meta = {
            "meta.seen_labels":   ",".join(self.seen_labels),
            "meta.unseen_labels": ",".join(self.unseen_labels),
            "meta.tau":           format_float(self.tau),
        }
        if self.purity_before is not None:
            meta["meta.purity_before"] = format_float(self.purity_before)
        if self.purity_after is not None:
            meta["meta.purity_after"] = format_float(self.purity_after)
        for key, value in self.config.flat().items():
            meta[f"config.{key}"] = value
        return save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = load_checkpoint(path)
        try:
            centroids = sorted(
                ((int(name.split(".", 1)[1]), value) for name, value in tensors.items()
                 if name.startswith("centroid.")),
                key=lambda item: item[0],
            )
            seen = tuple(meta["meta.seen_labels"].split(","))
            unseen = tuple(meta["meta.unseen_labels"].split(","))
            config = build_config({k.split(".", 1)[1]: v for k, v in meta.items()
                                   if k.startswith("config.")})
            return cls(
                mapper=MlpParams.from_tensors(tensors, "mapper."),
                psi_mapper=MlpParams.from_tensors(tensors, "psi_mapper."),
                classifier=ClassifierParams.from_tensors(tensors, "classifier."),
                clusters=ClusterModel(np.vstack([v for _, v in centroids])),
                embeddings={name.split(".", 1)[1]: value for name, value in tensors.items()
                            if name.startswith("embedding.")},
                seen_labels=seen,
                unseen_labels=unseen,
                rectified={name.split(".", 1)[1]: RectifiedEmbedding(name.split(".", 1)[1], value)
                           for name, value in tensors.items() if name.startswith("rectified.")},
                config=config,
                tau=float(meta["meta.tau"]),
                purity_before=float(meta["meta.purity_before"]) if "meta.purity_before" in meta else None,
                purity_after=float(meta["meta.purity_after"]) if "meta.purity_after" in meta else None,
            )
        except (KeyError, ValueError) as e:
            if isinstance(e, ClasterError):
                raise
            raise MalformedRecord(f"{path}: incomplete checkpoint ({e})")


@dataclass
class TrainingResult:
    model: TrainedModel
    mapper_losses: list
    classifier_losses: list
    purity_trace: list = field(default_factory=list)
    purity_init: Optional[float] = None
    purity_before: Optional[float] = None
    purity_after: Optional[float] = None

    def progress_log(self):
        return "".join(row.line() + "\n" for row in self.purity_trace)


# ── Phase functions ────────────────────────────────────────────────

def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_params(params, phase):
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise NonFiniteLoss(f"parameter '{name}' became non-finite", phase=phase)


def train_mapper(dataset, epochs, adam, rng, hidden=None, batch_size=32, mapper=None):
    """
    Fit a(y) -> a'(y) so that a'(y_i) is close to x_i in least squares.

    Returns (mapper, losses) where losses[0] is the loss before training
    and losses[e] the full-data loss after epoch e.
    """
    features = dataset.features()
    targets = dataset.embeddings.matrix(dataset.labels())
    if mapper is None:
        mapper = init_mlp(targets.shape[1], hidden or dataset.d_v, dataset.d_v, rng)
    state = adam.state()

    def _full_loss():
        return least_squares_loss(mlp_forward(mapper, targets), features)[0]

    losses = [_full_loss()]
    for _ in range(epochs):
        for batch in _batches(len(features), batch_size, rng):
            _, upstream = least_squares_loss(mlp_forward(mapper, targets[batch]), features[batch])
            grads, _ = mlp_gradient(mapper, targets[batch], upstream)
            params, state = adam_step(state, mapper.tensors(), grads)
            _check_params(params, "mapper")
            mapper = MlpParams.from_tensors(params)
        losses.append(_full_loss())
    if not np.isfinite(losses[-1]):
        raise NonFiniteLoss("mapper loss became non-finite", phase="mapper")
    return mapper, losses


def clustering_points(dataset, mapper):
    """x_i ++ a'(y_i), using the ground-truth class embedding of each instance."""
    projected = mlp_forward(mapper, dataset.embeddings.matrix(dataset.labels()))
    return np.hstack([dataset.features(), projected])


def init_clusters(dataset, mapper, k, seed, mode="full", init="plusplus", n_init=4, standardize=False):
    """Returns (ClusterModel, PurityReport on the clustering points)."""
    points = clustering_points(dataset, mapper)
    if mode == "no_clustering":
        k = 1
    kmeans_mode = "random_assign" if mode == "random_clustering" else init
    model = kmeans_fit(points, k, seed=seed, mode=kmeans_mode, n_init=n_init, standardize=standardize)
    report = purity(assign_all(model, points)[0], dataset.labels(), model.k)
    return model, report


def train_classifier(dataset, clusters, mapper, psi_mapper, classifier, seen_labels, epochs,
                     lam, adam, rng, batch_size=32, psi_align_weight=0.0):
    """
    Minibatch training of the psi mapper and V; centroids are not touched.

    Per batch: psi = x ++ phi(x), omega from the cluster weights, V(omega),
    semantic softmax over the seen classes, cross-entropy + lam·Σ||W||².
    `psi_align_weight` adds mean ||phi(x_i) − a'(y_i)||² for the psi mapper.

    Returns (psi_mapper, classifier, per-epoch mean loss).
    """
    features = dataset.features()
    labels = dataset.labels()
    index = {label: i for i, label in enumerate(seen_labels)}
    targets = np.array([index[label] for label in labels])
    class_matrix = dataset.embeddings.matrix(seen_labels)
    aligned = mlp_forward(mapper, dataset.embeddings.matrix(labels))
    d_v = dataset.d_v
    state = adam.state()

    losses = []
    for epoch in range(epochs):
        batch_losses = []
        for batch in _batches(len(features), batch_size, rng):
            x = features[batch]
            try:
                phi = mlp_forward(psi_mapper, x)
                psi = np.hstack([x, phi])
                omega, _ = claster_omega(clusters, psi)
                projected = classifier_forward(classifier, omega)
                probs = semantic_softmax(class_matrix, projected)
            except NonFiniteValue as e:
                raise NonFiniteLoss(f"epoch {epoch + 1}: {e}", phase="classifier") from e

            weights = psi_mapper.weight_matrices() + classifier.weight_matrices()
            value = semantic_loss(probs, targets[batch], weights, lam, seen_embeddings=class_matrix)
            cls_grads, d_omega = classifier_gradient(classifier, omega, value.gradient)
            d_phi = claster_gradient(clusters, psi, d_omega)[:, d_v:]

            loss = value.loss
            if psi_align_weight > 0:
                align_loss, align_grad = least_squares_loss(phi, aligned[batch])
                loss += psi_align_weight * align_loss
                d_phi = d_phi + psi_align_weight * align_grad
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch + 1}: loss is {loss}", phase="classifier")

            psi_grads, _ = mlp_gradient(psi_mapper, x, d_phi)
            for name in ("layer1.weights", "layer2.weights"):
                psi_grads[name] = psi_grads[name] + 2 * lam * psi_mapper.tensors()[name]
            for name, tensor in classifier.tensors().items():
                if name.endswith(".weights"):
                    cls_grads[name] = cls_grads[name] + 2 * lam * tensor

            params = {**psi_mapper.tensors("psi_mapper."), **classifier.tensors("classifier.")}
            grads = {**{f"psi_mapper.{k}": v for k, v in psi_grads.items()},
                     **{f"classifier.{k}": v for k, v in cls_grads.items()}}
            params, state = adam_step(state, params, grads)
            _check_params(params, "classifier")
            psi_mapper = MlpParams.from_tensors(params, "psi_mapper.")
            classifier = ClassifierParams.from_tensors(params, "classifier.")
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
        log.debug(f"classifier epoch {epoch + 1}: loss {losses[-1]:.4f}")
    return psi_mapper, classifier, losses


def optimize_centroids(clusters, psi, targets, labels, classifier, class_matrix, rl, rng):
    """
    REINFORCE over single samples, cycling the training set in a fresh
    random order on every pass.

    Args:
        clusters: starting ClusterModel (left untouched; a copy is updated)
        psi: (N, 2·d_v) psi rows of the training instances
        targets: seen-class index per row
        labels: class label per row, for purity
        classifier, class_matrix: V and the seen a(y) matrix
        rl: RLConfig
        rng: sample-order generator

    Returns:
        (ClusterModel, list of RLProgress)
    """
    model = clusters.copy()
    n = psi.shape[0]
    trace = []
    reward_total = 0
    for iteration in range(rl.total_iterations):
        if iteration % n == 0:
            order = rng.permutation(n)
        i = order[iteration % n]
        alpha = schedule_alpha(rl, iteration)
        omega = claster_representation(model, psi[i]).omega
        y_hat = semantic_softmax(class_matrix, classifier_forward(classifier, omega))
        step = reinforce_step(model, psi[i], y_hat, int(targets[i]), alpha)
        reward_total += step.reward
        if (iteration + 1) % rl.log_every == 0 or iteration + 1 == rl.total_iterations:
            current = purity(assign_all(model, psi)[0], labels, model.k).purity
            row = RLProgress(iteration + 1, alpha, reward_total / (iteration + 1), current)
            trace.append(row)
            log.debug(row.line())
    if not np.all(np.isfinite(model.vectors)):
        raise NonFiniteLoss("centroids became non-finite", phase="rl")
    return model, trace


def finalize(mapper, seen_labels, unseen_labels, embeddings, rectify_k, rectify=True, space="visual"):
    """
    Unseen-class match targets, rectified against the seen classes.

    In the visual space both sides go through the mapper; in the semantic
    space the raw class embeddings are used, matching queries computed by V.
    """
    def _side(labels):
        if space == "semantic":
            return {label: embeddings.vector(label) for label in labels}
        return {label: mlp_forward(mapper, embeddings.vector(label)) for label in labels}

    unseen = _side(unseen_labels)
    if not rectify:
        return plain_embeddings(unseen)
    return rectify_all(unseen, _side(seen_labels), rectify_k)


# ── Engine ─────────────────────────────────────────────────────────

class ClasterTrainer:
    """
    Runs the training phases over one dataset, one at a time.

    Calling a phase before its predecessor has run raises PhaseOrderError.
    Errors raised inside a phase carry that phase's name.
    """

    def __init__(self, dataset, config):
        log.info("⚙️  Initializing CLASTER trainer...")
        self.config = config
        if config.normalize_embeddings:
            dataset = replace(dataset, embeddings=normalize_embeddings(dataset.embeddings))
        self.split = dataset.split
        self.embeddings = dataset.embeddings
        self.seen_labels = tuple(dataset.split.seen)
        self.unseen_labels = tuple(dataset.split.unseen)

        self.train = dataset.seen_only()
        dropped = len(dataset) - len(self.train)
        if dropped:
            log.warning(f"⚠️  Dropped {dropped} training instance(s) with unseen-class labels")
        if not len(self.train):
            raise NoSeenInstances("no seen-class instances to train on")

        streams = np.random.SeedSequence(config.seed).spawn(4)
        self._rng = {
            "mapper": np.random.default_rng(streams[0]),
            "init": np.random.default_rng(streams[1]),
            "batches": np.random.default_rng(streams[2]),
            "rl": np.random.default_rng(streams[3]),
        }
        self._done = []

        self.mapper = None
        self.psi_mapper = None
        self.classifier = None
        self.clusters = None
        self.mapper_losses = []
        self.classifier_losses = []
        self.purity_trace = []
        self.purity_init = None
        self.purity_before = None
        self.purity_after = None
        self.model = None
        log.info(f"✅ {len(self.train)} training instances, "
                 f"{len(self.seen_labels)} seen / {len(self.unseen_labels)} unseen classes\n")

    # ─────────────────────────────────────────────────────────────────────
    # PHASE BOOKKEEPING
    # ─────────────────────────────────────────────────────────────────────

    def _require(self, phase):
        needed = PHASES[PHASES.index(phase) - 1]
        if needed not in self._done:
            raise PhaseOrderError(f"phase '{phase}' needs '{needed}' to run first", phase=phase)
        if "finalize" in self._done:
            raise PhaseOrderError("model already finalized", phase=phase)

    @contextmanager
    def _phase(self, name):
        log.info(f"▶  Phase: {name}")
        try:
            yield
        except ClasterError as e:
            if e.phase is None:
                e.phase = name
            raise
        self._done.append(name)
        log.info(f"✅ Phase done: {name}")

    # ─────────────────────────────────────────────────────────────────────
    # PHASES
    # ─────────────────────────────────────────────────────────────────────

    def fit_mapper(self):
        if "mapper" in self._done:
            raise PhaseOrderError("mapper is frozen once trained", phase="mapper")
        cfg = self.config
        with self._phase("mapper"):
            self.mapper, self.mapper_losses = train_mapper(
                self.train, cfg.mapper_epochs, cfg.adam, self._rng["mapper"],
                hidden=cfg.dims.mapper_hidden, batch_size=cfg.batch_size,
            )
            log.info(f"   mapper loss {self.mapper_losses[0]:.4f} -> {self.mapper_losses[-1]:.4f}")
        return self.mapper

    def fit_clusters(self):
        self._require("clusters")
        cfg = self.config
        with self._phase("clusters"):
            self.clusters, report = init_clusters(
                self.train, self.mapper, cfg.k_clusters, cfg.seed, mode=cfg.ablation_mode,
                init=cfg.kmeans_init, n_init=cfg.kmeans_n_init, standardize=cfg.standardize,
            )
            self.purity_init = report.purity
            log.info(f"   {self.clusters.k} cluster(s), purity {report.purity:.4f}")
        return self.clusters

    def fit_classifier(self):
        self._require("classifier")
        cfg = self.config
        with self._phase("classifier"):
            if self.classifier is None:
                d_v = self.train.d_v
                rng = self._rng["init"]
                self.psi_mapper = init_mlp(d_v, cfg.dims.psi_hidden or d_v, d_v, rng)
                self.classifier = init_classifier(
                    2 * d_v, self.embeddings.dim, rng, kernel_size=cfg.dims.kernel_size,
                    channels=cfg.dims.conv_channels, fc_hidden=cfg.dims.fc_hidden,
                )
            self.psi_mapper, self.classifier, losses = train_classifier(
                self.train, self.clusters, self.mapper, self.psi_mapper, self.classifier,
                self.seen_labels, cfg.classifier_epochs, cfg.lam, cfg.adam,
                self._rng["batches"], batch_size=cfg.batch_size,
                psi_align_weight=cfg.psi_align_weight,
            )
            self.classifier_losses.extend(losses)
            if losses:
                log.info(f"   classifier loss {losses[0]:.4f} -> {losses[-1]:.4f}")
        return self.psi_mapper, self.classifier

    def _psi_purity(self, psi):
        return purity(assign_all(self.clusters, psi)[0], self.train.labels(), self.clusters.k).purity

    def fit_centroids(self):
        self._require("rl")
        with self._phase("rl"):
            psi = build_psi_batch(self.psi_mapper, self.train.features())
            before = self._psi_purity(psi)
            if self.purity_before is None:
                self.purity_before = before
            if self.config.ablation_mode != "full":
                log.info(f"   skipped for ablation mode '{self.config.ablation_mode}'")
                self.purity_after = before
            else:
                index = {label: i for i, label in enumerate(self.seen_labels)}
                targets = np.array([index[label] for label in self.train.labels()])
                self.clusters, trace = optimize_centroids(
                    self.clusters, psi, targets, self.train.labels(), self.classifier,
                    self.embeddings.matrix(self.seen_labels), self.config.rl, self._rng["rl"],
                )
                self.purity_trace.extend(trace)
                self.purity_after = self._psi_purity(psi)
                log.info(f"   purity {before:.4f} -> {self.purity_after:.4f}")
        return self.clusters

    def finalize(self):
        self._require("finalize")
        cfg = self.config
        with self._phase("finalize"):
            rectified = finalize(
                self.mapper, self.seen_labels, self.unseen_labels, self.embeddings,
                cfg.rectify_k, rectify=cfg.rectify,
                space="semantic" if cfg.query_mode == "semantic" else "visual",
            )
            self.model = TrainedModel(
                mapper=self.mapper,
                psi_mapper=self.psi_mapper,
                classifier=self.classifier,
                clusters=self.clusters,
                embeddings={label: self.embeddings.vector(label) for label in self.embeddings.labels},
                seen_labels=self.seen_labels,
                unseen_labels=self.unseen_labels,
                rectified=rectified,
                config=cfg,
                tau=cfg.gate.tau,
                purity_before=self.purity_before,
                purity_after=self.purity_after,
            )
        return self.model

    def result(self):
        if self.model is None:
            raise PhaseOrderError("no trained model yet", phase="finalize")
        return TrainingResult(
            model=self.model,
            mapper_losses=self.mapper_losses,
            classifier_losses=self.classifier_losses,
            purity_trace=self.purity_trace,
            purity_init=self.purity_init,
            purity_before=self.purity_before,
            purity_after=self.purity_after,
        )


def run_pipeline(dataset, config):
    """Every phase in order; returns a TrainingResult."""
    holdout = None
    if config.gate.tune and config.gate.holdout_fraction > 0:
        dataset, holdout = holdout_split(dataset.seen_only(), config.gate.holdout_fraction, config.seed)

    trainer = ClasterTrainer(dataset, config)
    trainer.fit_mapper()
    trainer.fit_clusters()
    for _ in range(config.alternations):
        trainer.fit_classifier()
        trainer.fit_centroids()
    model = trainer.finalize()

    if holdout is not None and len(holdout):
        top = model.seen_probabilities(holdout.features()).max(axis=1)
        model.tau = tune_tau(top, config.gate.target_seen_rate)
    return trainer.result()


def sweep_clusters(train, test, config, ks, seeds):
    """
    Unseen-class ZSL accuracy for each cluster count.

    Returns a DataFrame with columns k, mean, std (n − 1), runs.
    """
    unseen_test = test.unseen_only()
    rows = []
    for k in ks:
        scores = []
        for seed in seeds:
            model = run_pipeline(train, with_overrides(config, k_clusters=k, seed=seed)).model
            predicted = model.predict_zsl(unseen_test.features())
            report = per_class_accuracy(predicted, unseen_test.labels(), train.split.unseen)
            scores.append(report.mean_class_accuracy)
        mean, std = summarize_runs(scores)
        rows.append({"k": k, "mean": mean, "std": std, "runs": len(scores)})
        log.info(f"   k={k}: {mean:.4f} ± {std:.4f}")
    return pd.DataFrame(rows, columns=["k", "mean", "std", "runs"])
