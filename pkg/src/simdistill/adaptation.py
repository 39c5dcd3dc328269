"""Training orchestration: supervised pre-training, per-target adaptation of
teacher backbones, multi-teacher distillation into the student, and the
experiment rows (bounds, blending, one-model-per-target, distillation,
mixed-teacher distillation)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from . import tensor as T
from .data import DomainDataset, as_unlabeled, blend_targets, generate_domain, split_query_gallery
from .errors import ConfigError, ContractError
from .evaluate import complexity_report, evaluate_model
from .losses import batch_hard_triplet, cross_entropy_loss, default_bandwidths, kd_similarity_loss, mmd_loss
from .models import SGD, BackboneModel
from .sampling import PKSampler
from .scenario import (
    ROW_NAMES,
    ExperimentConfig,
    ResultsTable,
    RowResult,
    TrainConfig,
    derived_rng,
    source_spec,
    stable_seed,
    target_test_spec,
    target_train_spec,
)
from .tensor import Tensor2D


def learning_rate(epoch: int, config: TrainConfig) -> float:
    """Step-decayed rate: lr0 / factor^floor(epoch / every)."""
    steps = epoch // config.lr_decay_every
    return config.lr0 / config.lr_decay_factor**steps


# -- pluggable single-target adaptation methods -------------------------------------


@dataclass(frozen=True)
class StdaMethod:
    """A single-target adaptation objective.

    ``adapt_step(model, source_batch, target_batch)`` returns the scalar
    adaptation loss to minimize. It must never read target identity labels;
    the dataset access flag enforces that at runtime.
    """

    name: str
    adapt_step: Callable[[BackboneModel, object, object], Tensor2D]


def _mmd_step(model, source_batch, target_batch):
    fs = T.l2_normalize_rows(model.embed(source_batch.inputs))
    ft = T.l2_normalize_rows(model.embed(target_batch.inputs))
    return mmd_loss(fs, ft, default_bandwidths(fs.values, ft.values))


def _mmd_raw_step(model, source_batch, target_batch):
    # Fixed bandwidth on unnormalized embeddings: adequate when embedding
    # scales are near the pre-training regime, vanishing gradients when a
    # target's scale shift pushes distances far beyond the bandwidth.
    fs = model.embed(source_batch.inputs)
    ft = model.embed(target_batch.inputs)
    return mmd_loss(fs, ft, [2.0])


def _identity_step(model, source_batch, target_batch):
    return Tensor2D([[0.0]])


STDA_METHODS = {
    "mmd": StdaMethod("mmd", _mmd_step),
    "mmd_raw": StdaMethod("mmd_raw", _mmd_raw_step),
    "identity": StdaMethod("identity", _identity_step),
}


def get_stda_method(name: str) -> StdaMethod:
    try:
        return STDA_METHODS[name]
    except KeyError:
        raise ConfigError(
            f"unknown STDA method {name!r}; known: {', '.join(sorted(STDA_METHODS))}"
        ) from None


# -- training phases ------------------------------------------------------------------


def _supervised_loss(model, batch, config):
    emb = model.embed(batch.inputs)
    ce = cross_entropy_loss(model.logits(emb), batch.identities)
    triplet = batch_hard_triplet(emb, batch.identities, config.margin)
    return T.add(ce, triplet)


def pretrain_supervised(
    model: BackboneModel,
    source: DomainDataset,
    config: TrainConfig,
    rng=None,
    epochs: int | None = None,
) -> BackboneModel:
    """Supervised pre-training with cross-entropy + batch-hard triplet.

    Attaches a classifier head over the source identities for the duration
    of this phase (the caller decides when to drop it).
    """
    if not source.labeled:
        raise ContractError("pretraining requires a labeled source dataset")
    if rng is None:
        rng = derived_rng(config.seed, "pretrain")
    if model.classifier is None:
        num_classes = int(source.identities.max()) + 1
        model.attach_classifier(num_classes, rng)
    sampler = PKSampler(source, config.batch_p, config.batch_k)
    optimizer = SGD(model.parameters(), momentum=config.momentum)
    epochs = config.pretrain_epochs if epochs is None else epochs
    for epoch in range(epochs):
        lr = learning_rate(epoch, config)
        for batch in sampler.epoch(rng):
            with T.Tape() as tape:
                loss = _supervised_loss(model, batch, config)
            model.zero_grads()
            tape.backward(loss)
            optimizer.step(lr)
    return model


@dataclass
class StdaRecord:
    epoch_losses: list[float] = field(default_factory=list)
    epochs_run: int = 0


def stda_adapt(
    teacher: BackboneModel,
    source: DomainDataset,
    target: DomainDataset,
    method: StdaMethod,
    config: TrainConfig,
    rng=None,
) -> StdaRecord:
    """Adapt one teacher to one target with the given method.

    Each step pairs a 32-sample source batch with a 32-sample target batch
    and minimizes adaptation loss plus weighted supervised source losses
    (both cited adaptation methods keep source supervision). Stops at
    ``stda_max_epochs`` or when the epoch-mean adaptation loss stagnates.
    """
    if target.labeled:
        raise ContractError("stda_adapt expects an unlabeled target dataset")
    if teacher.classifier is None:
        raise ContractError("teacher must be pre-trained (classifier head attached)")
    if rng is None:
        rng = derived_rng(config.seed, "stda", method.name)
    src_sampler = PKSampler(source, config.batch_p, config.batch_k)
    tgt_sampler = PKSampler(target, config.batch_p, config.batch_k)
    optimizer = SGD(teacher.parameters(), momentum=config.momentum)
    record = StdaRecord()
    best = math.inf
    flat_epochs = 0
    for epoch in range(config.stda_max_epochs):
        lr = learning_rate(epoch, config)
        epoch_losses = []
        for bs, bt in zip(src_sampler.epoch(rng), tgt_sampler.epoch(rng)):
            with T.Tape() as tape:
                adapt = method.adapt_step(teacher, bs, bt)
                loss = T.add(
                    adapt,
                    T.scale(_supervised_loss(teacher, bs, config), config.stda_supervised_weight),
                )
            teacher.zero_grads()
            tape.backward(loss)
            optimizer.step(lr)
            epoch_losses.append(adapt.item())
        mean_loss = sum(epoch_losses) / len(epoch_losses)
        record.epoch_losses.append(mean_loss)
        record.epochs_run = epoch + 1
        if best - mean_loss < config.stda_stagnation_tol:
            flat_epochs += 1
            if flat_epochs >= config.stop_window:
                break
        else:
            flat_epochs = 0
        best = min(best, mean_loss)
    return record


@dataclass
class KdRecord:
    permutations: list[tuple[int, ...]] = field(default_factory=list)
    avg_map_history: list[float] = field(default_factory=list)
    per_target_map_history: list[list[float]] = field(default_factory=list)
    best_epoch: int = -1  # -1 means the pre-distillation checkpoint
    best_avg_map: float = 0.0
    epochs_run: int = 0


def kd_distill(
    student: BackboneModel,
    teachers: list[tuple[BackboneModel, DomainDataset]],
    config: TrainConfig,
    validations: list[tuple[DomainDataset, DomainDataset]],
    rng=None,
) -> KdRecord:
    """Distill every adapted teacher into the student.

    Each epoch visits the targets in a fresh random order; per target it
    runs target-only batches (kd_batch_p groups of K) minimizing the
    similarity-matrix loss against that target's frozen teacher. Stops when
    the average validation mAP improves by less than ``stop_delta`` for
    ``stop_window`` consecutive epochs (or at ``max_epochs``) and restores
    the best-average-mAP checkpoint.
    """
    if not teachers:
        raise ConfigError("kd_distill needs at least one teacher")
    if len(validations) != len(teachers):
        raise ConfigError("one validation split per teacher is required")
    if rng is None:
        rng = derived_rng(config.seed, "kd")
    samplers = [PKSampler(ds, config.kd_batch_p, config.batch_k) for _, ds in teachers]
    optimizer = SGD(student.parameters(include_classifier=False), momentum=config.momentum)
    record = KdRecord()

    def validate() -> float:
        maps = [
            evaluate_model(student, query, gallery).mAP for query, gallery in validations
        ]
        record.per_target_map_history.append(maps)
        return sum(maps) / len(maps)

    best_state = [p.values.copy() for p in student.parameters(include_classifier=False)]
    record.best_avg_map = validate()
    record.avg_map_history.append(record.best_avg_map)

    flat_epochs = 0
    for epoch in range(config.max_epochs):
        lr = learning_rate(epoch, config)
        perm = tuple(int(i) for i in rng.permutation(len(teachers)))
        record.permutations.append(perm)
        for t_idx in perm:
            teacher, _ = teachers[t_idx]
            for batch in samplers[t_idx].epoch(rng):
                with T.Tape() as tape:
                    student_feats = student.embed(batch.inputs)
                    with T.pause_recording():
                        teacher_feats = teacher.embed(batch.inputs)
                    loss = kd_similarity_loss(student_feats, teacher_feats)
                student.zero_grads()
                tape.backward(loss)
                optimizer.step(lr)
        avg = validate()
        record.avg_map_history.append(avg)
        record.epochs_run = epoch + 1
        improvement = avg - record.best_avg_map
        if avg > record.best_avg_map:
            record.best_avg_map = avg
            record.best_epoch = epoch
            best_state = [
                p.values.copy() for p in student.parameters(include_classifier=False)
            ]
        if improvement < config.stop_delta:
            flat_epochs += 1
            if flat_epochs >= config.stop_window:
                break
        else:
            flat_epochs = 0

    for p, best in zip(student.parameters(include_classifier=False), best_state):
        p.values[...] = best
    return record


# -- experiment rows -------------------------------------------------------------------


@dataclass
class ScenarioData:
    """All datasets and splits one experiment run needs."""

    source: DomainDataset
    target_train: list[DomainDataset]  # unlabeled
    validation: list[tuple[DomainDataset, DomainDataset]]
    test: list[tuple[DomainDataset, DomainDataset]]
    target_names: list[str]


def build_scenario_data(cfg: ExperimentConfig) -> ScenarioData:
    source = generate_domain(source_spec(cfg))
    target_train, validation, test, names = [], [], [], []
    for idx in range(len(cfg.targets)):
        train = as_unlabeled(generate_domain(target_train_spec(cfg, idx)))
        test_ds = as_unlabeled(generate_domain(target_test_spec(cfg, idx)))
        target_train.append(train)
        validation.append(
            split_query_gallery(train, cfg.query_fraction, stable_seed_for(cfg, "val", idx))
        )
        test.append(
            split_query_gallery(test_ds, cfg.query_fraction, stable_seed_for(cfg, "test", idx))
        )
        names.append(train.domain_id)
    return ScenarioData(source, target_train, validation, test, names)


def stable_seed_for(cfg: ExperimentConfig, *parts) -> int:
    return stable_seed(cfg.seed, *parts)


def _build_student(cfg: ExperimentConfig, width: float) -> BackboneModel:
    return BackboneModel(
        cfg.input_dim,
        list(cfg.student_hidden),
        cfg.student_embed,
        seed=stable_seed_for(cfg, "init", "student", width),
        role="student",
        width_scale=width,
    )

def _build_teacher(cfg: ExperimentConfig) -> BackboneModel:
    return BackboneModel(
        cfg.input_dim,
        list(cfg.teacher_hidden),
        cfg.teacher_embed,
        seed=stable_seed_for(cfg, "init", "teacher"),
        role="teacher",
    )


class _Workspace:
    """Memoizes the width-independent artifacts (pre-trained teacher, adapted
    teachers) so sweep runs do not recompute them; everything it caches is a
    deterministic function of the scenario config."""

    def __init__(self, cfg: ExperimentConfig, data: ScenarioData | None = None):
        self.cfg = cfg
        self.data = data or build_scenario_data(cfg)
        self._cache: dict = {}

    def pretrained_student(self, width: float) -> BackboneModel:
        key = ("student", width)
        if key not in self._cache:
            model = _build_student(self.cfg, width)
            pretrain_supervised(
                model,
                self.data.source,
                self.cfg.train,
                derived_rng(self.cfg.seed, "pretrain", "student", width),
            )
            self._cache[key] = model
        return self._cache[key].clone()

    def pretrained_teacher(self) -> BackboneModel:
        if ("teacher",) not in self._cache:
            model = _build_teacher(self.cfg)
            pretrain_supervised(
                model,
                self.data.source,
                self.cfg.train,
                derived_rng(self.cfg.seed, "pretrain", "teacher"),
            )
            self._cache[("teacher",)] = model
        return self._cache[("teacher",)].clone()

    def adapted_teacher(self, t_idx: int, method_name: str) -> BackboneModel:
        key = ("adapted", t_idx, method_name)
        if key not in self._cache:
            teacher = self.pretrained_teacher()
            stda_adapt(
                teacher,
                self.data.source,
                self.data.target_train[t_idx],
                get_stda_method(method_name),
                self.cfg.train,
                derived_rng(self.cfg.seed, "stda", t_idx, method_name),
            )
            self._cache[key] = teacher
        return self._cache[key]


def _eval_on_targets(model, data: ScenarioData) -> list:
    return [evaluate_model(model, query, gallery) for query, gallery in data.test]


def run_mtda_experiment(
    cfg: ExperimentConfig,
    width: float | None = None,
    workspace: _Workspace | None = None,
) -> ResultsTable:
    """Execute the requested experiment rows for one student width and
    return the per-target / average metrics plus complexity per row."""
    cfg.validate()
    for name in cfg.methods_for_targets(mixed=False) + cfg.methods_for_targets(mixed=True):
        get_stda_method(name)
    width = cfg.student_widths[0] if width is None else width
    ws = workspace or _Workspace(cfg)
    data = ws.data
    table = ResultsTable(
        scenario_id=cfg.scenario_id,
        seed=cfg.seed,
        student_width=width,
        target_names=list(data.target_names),
        rows=[],
    )
    uniform = cfg.methods_for_targets(mixed=False)

    trained_models: dict[str, list[BackboneModel] | BackboneModel] = {}
    for row_name in cfg.rows:
        if row_name == "lower_bound":
            model = ws.pretrained_student(width)
            model.drop_classifier()
            table.rows.append(
                RowResult("lower_bound", _eval_on_targets(model, data), complexity_report(model))
            )
            trained_models[row_name] = model
        elif row_name == "per_target":
            teachers = [ws.adapted_teacher(i, uniform[i]) for i in range(len(cfg.targets))]
            metrics = []
            for i, teacher in enumerate(teachers):
                deployed = teacher.clone()
                deployed.drop_classifier()
                metrics.append(evaluate_model(deployed, *data.test[i]))
            sample = teachers[0].clone()
            sample.drop_classifier()
            table.rows.append(
                RowResult(
                    "per_target",
                    metrics,
                    complexity_report(sample),
                    models_counted=len(teachers),
                )
            )
            trained_models[row_name] = teachers
        elif row_name == "blending":
            model = ws.pretrained_student(width)
            blend = blend_targets(data.target_train)
            stda_adapt(
                model,
                data.source,
                blend,
                get_stda_method(cfg.stda_method),
                cfg.train,
                derived_rng(cfg.seed, "stda", "blend", cfg.stda_method, width),
            )
            model.drop_classifier()
            table.rows.append(
                RowResult("blending", _eval_on_targets(model, data), complexity_report(model))
            )
            trained_models[row_name] = model
        elif row_name in ("kd_reid", "kd_mixed"):
            methods = cfg.methods_for_targets(mixed=row_name == "kd_mixed")
            model = ws.pretrained_student(width)
            model.drop_classifier()
            teachers = [
                (ws.adapted_teacher(i, methods[i]), data.target_train[i])
                for i in range(len(cfg.targets))
            ]
            kd_distill(
                model,
                teachers,
                cfg.train,
                data.validation,
                derived_rng(cfg.seed, "kd", "-".join(methods), width),
            )
            table.rows.append(
                RowResult(row_name, _eval_on_targets(model, data), complexity_report(model))
            )
            trained_models[row_name] = model
        elif row_name == "upper_bound":
            model = _build_student(cfg, width)
            labeled_blend = blend_targets(
                [ds.with_labels_revealed() for ds in data.target_train]
            )
            pretrain_supervised(
                model,
                labeled_blend,
                cfg.train,
                derived_rng(cfg.seed, "supervised-targets", width),
            )
            model.drop_classifier()
            table.rows.append(
                RowResult("upper_bound", _eval_on_targets(model, data), complexity_report(model))
            )
            trained_models[row_name] = model
        else:
            raise ConfigError(f"unknown row {row_name!r}")
    table.rows.sort(key=lambda r: ROW_NAMES.index(r.name))
    table.trained_models = trained_models
    return table
