"""Training loop, optimizer, LR schedule, cross-validation and checkpoints.

Everything is deterministic: one seeded generator drives shuffling,
augmentation and mixup pairing, its state is captured in every checkpoint,
and resuming from a checkpoint reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .autograd import Tape, Tensor, backward
from .errors import (CheckpointIntegrityError, CheckpointVersionError,
                     ConfigurationError, TrainingDivergedError)
from .losses import LossConfig, total_loss
from .metrics import binarize, evaluate_case, mean_report, overlap_metrics
from .model import ModelConfig, init_weights, model_forward, predict_case
from .preprocess import AugmentPolicy, augment, mixup
from .runtime import tune_allocator
from .volume import Volume

_CKPT_FORMAT = "petctseg-ckpt-v1"
LOG_COLUMNS = ("epoch", "lr", "train_loss", "test_dsc")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol settings; defaults follow the training recipe."""

    epochs: int = 300
    batch_size: int = 1
    lr_init: float = 3e-4
    lr_floor: float = 1e-6
    cycle_epochs: int = 25
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    folds: int = 5
    lr_mode: str = "cosine_restarts"
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    augment: AugmentPolicy = AugmentPolicy()

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size != 1:
            raise ConfigurationError("only batch_size = 1 is supported")
        if not self.lr_floor < self.lr_init:
            raise ConfigurationError("lr_floor must be below lr_init")
        if self.cycle_epochs < 1:
            raise ConfigurationError("cycle_epochs must be >= 1")
        if self.folds < 2:
            raise ConfigurationError("folds must be >= 2")
        if self.lr_mode not in ("cosine_restarts", "step_decay"):
            raise ConfigurationError(
                f"unknown lr_mode {self.lr_mode!r}; expected 'cosine_restarts'"
                " or 'step_decay'")


def lr_schedule(epoch, cfg):
    """Learning rate for an epoch.

    The default mode anneals from lr_init down to exactly lr_floor across
    each cycle of ``cycle_epochs`` epochs along a half cosine, then restarts
    at lr_init on the next cycle boundary. ``step_decay`` instead keeps
    lr_init and subtracts 1e-6 per completed cycle.
    """
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    c = cfg.cycle_epochs
    if cfg.lr_mode == "step_decay":
        return max(cfg.lr_init - 1e-6 * (epoch // c), cfg.lr_floor)
    phase = epoch % c
    if c == 1:
        return cfg.lr_init
    span = cfg.lr_init - cfg.lr_floor
    return cfg.lr_floor + 0.5 * span * (1.0 + math.cos(math.pi * phase / (c - 1)))


def crossval_split(case_ids, folds, seed):
    """Seeded shuffle, then fold i tests on the i-th contiguous slice.

    Returns ``folds`` pairs of (train_ids, test_ids); the test slices are
    disjoint and cover every case.
    """
    ids = list(case_ids)
    if len(ids) < folds:
        raise ConfigurationError(
            f"need at least {folds} cases for {folds}-fold splitting")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    base, extra = divmod(len(order), folds)
    splits = []
    start = 0
    for i in range(folds):
        size = base + (1 if i < extra else 0)
        test = order[start:start + size]
        train = order[:start] + order[start + size:]
        splits.append((train, test))
        start += size
    return splits


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def initial(cls, params):
        return cls(step=0,
                   m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params, grads, state, lr, cfg):
    """One bias-corrected Adam update; returns fresh params and state."""
    t = state.step + 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        g = grads[name]
        if g.shape != params[name].data.shape:
            raise ConfigurationError(f"gradient shape mismatch for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = Tensor(params[name].data - update,
                                  requires_grad=True)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict            # name -> float32 ndarray
    adam_m: dict
    adam_v: dict
    adam_t: int
    epoch: int              # last completed epoch, -1 before any training
    best_dsc: float | None
    rng_state: dict

    def param_tensors(self):
        return {k: Tensor(v.copy(), requires_grad=True)
                for k, v in self.params.items()}

    def adam_state(self):
        return AdamState(step=self.adam_t,
                         m={k: v.copy() for k, v in self.adam_m.items()},
                         v={k: v.copy() for k, v in self.adam_v.items()})


def _json_safe(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


def config_to_dict(cfg):
    return {
        "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "lr_init": cfg.lr_init, "lr_floor": cfg.lr_floor,
        "cycle_epochs": cfg.cycle_epochs, "adam_beta1": cfg.adam_beta1,
        "adam_beta2": cfg.adam_beta2, "adam_eps": cfg.adam_eps,
        "seed": cfg.seed, "folds": cfg.folds, "lr_mode": cfg.lr_mode,
        "model": {
            "levels": cfg.model.levels,
            "base_channels": cfg.model.base_channels,
            "input_dims": list(cfg.model.input_dims),
            "attention_kernels": list(cfg.model.attention_kernels),
            "fusion_alpha": _json_safe(cfg.model.fusion_alpha),
            "modalities": list(cfg.model.modalities),
            "scale_attention": cfg.model.scale_attention,
            "norm_eps": cfg.model.norm_eps,
        },
        "loss": {
            "dice_eps": cfg.loss.dice_eps,
            "focal_alpha": cfg.loss.focal_alpha,
            "focal_gamma": cfg.loss.focal_gamma,
            "prob_clamp": cfg.loss.prob_clamp,
        },
        "augment": {
            "rotate_prob": cfg.augment.rotate_prob,
            "rotate_max_deg": cfg.augment.rotate_max_deg,
            "mirror_prob": cfg.augment.mirror_prob,
            "mixup_prob": cfg.augment.mixup_prob,
            "mixup_lambda": cfg.augment.mixup_lambda,
            "seed": cfg.augment.seed,
        },
    }


def _take(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown {where} config keys: {sorted(unknown)}")
    return d


def config_from_dict(data):
    """TrainConfig from a (possibly partial) plain dict; missing keys default."""
    data = dict(_take(data, set(config_to_dict(TrainConfig())), "train"))
    model = dict(data.pop("model", {}))
    loss = dict(data.pop("loss", {}))
    aug = dict(data.pop("augment", {}))
    if "fusion_alpha" in model and model["fusion_alpha"] in ("inf", "Infinity"):
        model["fusion_alpha"] = math.inf
    for key in ("input_dims", "attention_kernels", "modalities"):
        if key in model:
            model[key] = tuple(model[key])
    _take(model, {f.name for f in ModelConfig.__dataclass_fields__.values()},
          "model")
    _take(loss, {f.name for f in LossConfig.__dataclass_fields__.values()},
          "loss")
    _take(aug, {f.name for f in AugmentPolicy.__dataclass_fields__.values()},
          "augment")
    return TrainConfig(model=ModelConfig(**model), loss=LossConfig(**loss),
                       augment=AugmentPolicy(**aug), **data)


def _ckpt_paths(path):
    path = os.fspath(path)
    for suffix in (".ckpt.json", ".ckpt.bin"):
        if path.endswith(suffix):
            path = path[: -len(suffix)]
    return path + ".ckpt.json", path + ".ckpt.bin"


def save_checkpoint(ckpt, path):
    """Write ``<stem>.ckpt.json`` (manifest) + ``<stem>.ckpt.bin`` (payload).

    The payload is every array in manifest order as little-endian float32;
    save -> load -> save is byte-identical.
    """
    manifest_path, payload_path = _ckpt_paths(path)
    arrays = []
    blobs = []
    offset = 0
    for kind, table in (("param", ckpt.params), ("adam_m", ckpt.adam_m),
                        ("adam_v", ckpt.adam_v)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f4")
            arrays.append({"name": name, "kind": kind,
                           "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    manifest = {
        "format": _CKPT_FORMAT,
        "config": config_to_dict(ckpt.config),
        "epoch": ckpt.epoch,
        "best_dsc": ckpt.best_dsc,
        "adam_t": ckpt.adam_t,
        "rng_state": ckpt.rng_state,
        "payload_bytes": offset,
        "arrays": arrays,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(payload_path, "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(path):
    manifest_path, payload_path = _ckpt_paths(path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != _CKPT_FORMAT:
        raise CheckpointVersionError(
            f"unsupported checkpoint format {manifest.get('format')!r}")
    with open(payload_path, "rb") as fh:
        payload = fh.read()
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointIntegrityError(
            f"payload holds {len(payload)} bytes, manifest expects "
            f"{manifest['payload_bytes']}")
    tables = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in manifest["arrays"]:
        size = int(np.prod(entry["shape"])) * 4
        start = entry["offset"]
        if start + size > len(payload):
            raise CheckpointIntegrityError(
                f"array {entry['name']} overruns the payload")
        arr = np.frombuffer(payload[start:start + size], dtype="<f4")
        tables[entry["kind"]][entry["name"]] = \
            arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        config=config_from_dict(manifest["config"]),
        params=tables["param"],
        adam_m=tables["adam_m"],
        adam_v=tables["adam_v"],
        adam_t=manifest["adam_t"],
        epoch=manifest["epoch"],
        best_dsc=manifest["best_dsc"],
        rng_state=manifest["rng_state"],
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint | None   # highest test-DSC state (None if never beaten)
    final: Checkpoint         # state after the last completed epoch
    log: list                 # rows of (epoch, lr, train_loss, test_dsc)


def _rng_state(rng):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))  # plain ints/strings only


def _case_tensors(case, model_cfg):
    kwargs = {}
    if "CT" in model_cfg.modalities:
        kwargs["ct"] = Tensor(case.ct.values[None])
    if "PET" in model_cfg.modalities:
        kwargs["pet"] = Tensor(case.pet.values[None])
    return kwargs


def evaluate_mean_dsc(params, model_cfg, cases, threshold=0.5):
    """Mean DSC over cases (sorted by id), binarized at ``threshold``."""
    scores = []
    for case in sorted(cases, key=lambda c: c.case_id):
        prob = predict_case(params, model_cfg, case)
        pred = binarize(prob, threshold)
        scores.append(overlap_metrics(pred, case.mask.values)["dsc"])
    return float(np.mean(scores))


def _check_cases(cases, model_cfg, role):
    for case in cases:
        if not case.aligned() or case.ct.dims != model_cfg.input_dims:
            raise ConfigurationError(
                f"{role} case {case.case_id} is not preprocessed to "
                f"{model_cfg.input_dims}")


def _snapshot(cfg, params, adam, epoch, best_dsc, rng):
    return Checkpoint(
        config=cfg,
        params={k: t.data.copy() for k, t in params.items()},
        adam_m={k: v.copy() for k, v in adam.m.items()},
        adam_v={k: v.copy() for k, v in adam.v.items()},
        adam_t=adam.step,
        epoch=epoch,
        best_dsc=best_dsc,
        rng_state=_rng_state(rng),
    )


def write_log_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")


def train(train_cases, test_cases, cfg, resume_from=None, log_path=None,
          verbose=False):
    """Run the optimization loop and return best/final checkpoints plus log.

    Per epoch: seeded shuffle; per case, geometric augmentation, optional
    mixup with a random partner, forward, combined loss, backward and one
    Adam step at the scheduled rate; then the test-fold DSC on un-augmented
    cases. The best-DSC state is retained separately from the final state.
    A non-finite loss aborts with the offending epoch and case id.
    """
    tune_allocator()
    _check_cases(train_cases, cfg.model, "train")
    _check_cases(test_cases, cfg.model, "test")
    if not train_cases:
        raise ConfigurationError("no training cases")

    if resume_from is not None:
        # resuming legitimately raises the epoch budget; all else must match
        if replace(resume_from.config, epochs=cfg.epochs) != cfg:
            raise ConfigurationError(
                "resume checkpoint was produced by a different config")
        params = resume_from.param_tensors()
        adam = resume_from.adam_state()
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_from.rng_state
        start_epoch = resume_from.epoch + 1
        best_dsc = resume_from.best_dsc
    else:
        params = init_weights(cfg.model, cfg.seed)
        adam = AdamState.initial(params)
        rng = np.random.default_rng(cfg.seed)
        start_epoch = 0
        best_dsc = None

    best = None
    log = []
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(train_cases))
        losses = []
        for idx in order:
            case = train_cases[int(idx)]
            sample = augment(case, cfg.augment, rng)
            if len(train_cases) > 1 and rng.random() < cfg.augment.mixup_prob:
                partner_pool = [i for i in range(len(train_cases))
                                if i != int(idx)]
                partner = train_cases[partner_pool[int(rng.integers(len(partner_pool)))]]
                sample = mixup(sample, augment(partner, cfg.augment, rng),
                               cfg.augment.mixup_lambda)
            label = Tensor(sample.mask.values[None])
            with Tape() as tape:
                pred = model_forward(params, cfg.model,
                                     **_case_tensors(sample, cfg.model))
                loss = total_loss(pred, label, cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} on case {case.case_id}",
                    epoch=epoch, case_id=case.case_id)
            losses.append(value)
            backward(loss, tape)
            # a fully gated-out branch legitimately receives no gradient
            grads = {name: t.grad if t.grad is not None
                     else np.zeros_like(t.data)
                     for name, t in params.items()}
            params, adam = adam_step(params, grads, adam, lr, cfg)

        test_dsc = (evaluate_mean_dsc(params, cfg.model, test_cases)
                    if test_cases else math.nan)
        log.append((epoch, lr, float(np.mean(losses)), test_dsc))
        if verbose:
            print(f"epoch {epoch:4d}  lr {lr:.3e}  loss {np.mean(losses):.4f}"
                  f"  test dsc {test_dsc:.4f}")
        if test_cases and (best_dsc is None or test_dsc > best_dsc):
            best_dsc = test_dsc
            best = _snapshot(cfg, params, adam, epoch, best_dsc, rng)

    final = _snapshot(cfg, params, adam,
                      cfg.epochs - 1 if cfg.epochs > start_epoch else start_epoch - 1,
                      best_dsc, rng)
    if log_path is not None:
        write_log_csv(log, log_path)
    return TrainResult(best=best, final=final, log=log)


def train_crossval(cases, cfg, log_dir=None):
    """Five-fold (or cfg.folds) driver: one train() per fold.

    Returns the per-fold TrainResults in fold order.
    """
    by_id = {c.case_id: c for c in cases}
    results = []
    for fold, (train_ids, test_ids) in enumerate(
            crossval_split(sorted(by_id), cfg.folds, cfg.seed)):
        log_path = None
        if log_dir is not None:
            log_path = os.path.join(os.fspath(log_dir), f"fold{fold}_log.csv")
        results.append(train([by_id[i] for i in train_ids],
                             [by_id[i] for i in test_ids], cfg,
                             log_path=log_path))
    return results


# ---------------------------------------------------------------------------
# modality / fusion-ratio ablation
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("config", "dsc", "hd_mm", "assd_mm", "status")


def _ablation_cells(base_model):
    cells = [
        ("CT", replace(base_model, modalities=("CT",))),
        ("PET", replace(base_model, modalities=("PET",))),
        ("PET+CT", replace(base_model, modalities=("CT", "PET"),
                           fusion_alpha=1.0)),
    ]
    for alpha in (0.0, 0.5, 1.0, 2.0, math.inf):
        label = "alpha=inf" if math.isinf(alpha) else f"alpha={alpha:g}"
        cells.append((label, replace(base_model, modalities=("CT", "PET"),
                                     fusion_alpha=alpha)))
    return cells


def ablation_harness(cases, cfg):
    """Train and score the three modality variants and the five fusion ratios.

    Every cell trains from the same seed on the same fold-0 split; a failing
    cell is reported in its ``status`` column without stopping the others.
    Returns rows of (config, dsc, hd_mm, assd_mm, status).
    """
    by_id = {c.case_id: c for c in cases}
    train_ids, test_ids = crossval_split(sorted(by_id), cfg.folds, cfg.seed)[0]
    train_set = [by_id[i] for i in train_ids]
    test_set = [by_id[i] for i in test_ids]

    rows = []
    for label, model_cfg in _ablation_cells(cfg.model):
        cell_cfg = replace(cfg, model=model_cfg)
        try:
            result = train(train_set, test_set, cell_cfg)
            ckpt = result.best or result.final
            params = ckpt.param_tensors()
            reports = []
            for case in sorted(test_set, key=lambda c: c.case_id):
                prob = predict_case(params, model_cfg, case)
                prob_vol = Volume(prob, case.mask.spacing_mm, "MASK")
                reports.append(evaluate_case(prob_vol, case.mask,
                                             case_id=case.case_id))
            mean = mean_report(reports)
            rows.append((label, mean.dsc, mean.hd_mm, mean.assd_mm, "ok"))
        except Exception as exc:  # keep the other cells alive
            rows.append((label, math.nan, math.nan, math.nan,
                         f"error: {exc}"))
    return rows


def write_ablation_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(ABLATION_COLUMNS) + "\n")
        for label, dsc, hd, sd, status in rows:
            fh.write(f"{label},{dsc!r},{hd!r},{sd!r},{status}\n")
