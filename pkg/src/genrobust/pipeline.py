"""Experiment stages: train -> calibrate -> eval -> interpret -> ablate -> report.

Every stage reads and extends ``<out>/manifest.json``. An output directory
with trained heads and a calibration record is a *bundle*.
"""
from __future__ import annotations

import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackBudget
from .classifier import GenerativeClassifier, calibrate, collect_head_outputs
from .config import ExperimentConfig, config_from_dict, dump_config
from .data import class_partition, load_dataset
from .errors import CalibrationWarning, ConfigurationError
from .evaluation import (adversarial_auroc, clean_auroc, epsilon_sweep, evaluate, head_scores,
                         standard_accuracy)
from .interpret import (FeatureExtractor, InceptionFeatures, PenultimateFeatures, counterfactual, fid,
                        fit_class_gaussian, generate_class_samples, generation_budget, sample_seeds)
from .io import RunManifest, read_json, save_image_grid, write_json, write_table
from .models import build_head, build_softmax
from .plotting import plot_ablation, plot_head_histograms, plot_sweep, plot_trails
from .training import (CheckpointTrail, TrailEntry, TrainConfig, seeded_init, config_hash, early_stop_select,
                       train_binary_head, train_softmax_baseline)

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["model", "attack", "epsilon", "accuracy"]
FID_COLUMNS = ["mode", "attack", "model", "class", "extractor_id", "fid_reference", "fid_output",
               "flip_rate", "mean_norm"]
ABLATION_COLUMNS = ["axis", "value", "class", "selected_epoch", "clean_auroc", "adv_auroc",
                    "final_clean_auroc", "final_adv_auroc"]


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class Experiment:
    def __init__(self, cfg: ExperimentConfig, out_dir=None, device="cpu"):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.device = torch.device(device)
        self.manifest = RunManifest.open(self.out)
        self.manifest.set_config(cfg)
        self._data = {}
        dump_config(cfg, self.out / "config.yaml")

    # ------------------------------------------------------------ data
    def dataset(self, split):
        if split not in self._data:
            d = self.cfg.dataset
            ds = load_dataset(d.name, d.root, split, **d.load_kwargs())
            self.manifest.record_dataset(split, ds.fingerprint())
            ds.images = ds.images.to(self.device)
            ds.labels = ds.labels.to(self.device)
            self._data[split] = ds
        return self._data[split]

    @property
    def num_classes(self):
        return self.dataset("train").num_classes

    def head_config(self, k) -> TrainConfig:
        d = self.cfg.heads.as_dict()
        if k in self.cfg.lr_overrides:
            d["lr"] = self.cfg.lr_overrides[k]
        return TrainConfig.from_dict(d)

    def head_dir(self, k):
        return self.out / "heads" / f"head_{k}"

    # ------------------------------------------------------------ bundle loading
    def load_head(self, k):
        sel = read_json(self.head_dir(k) / "selected.json")
        head = build_head(sel["arch"], self.dataset("train").image_shape, k)
        head.load_state_dict(torch.load(sel["path"], map_location=self.device, weights_only=True))
        return head.to(self.device).eval()

    def load_classifier(self, calibrated=True) -> GenerativeClassifier:
        heads = [self.load_head(k) for k in range(self.num_classes)]
        gc = GenerativeClassifier(heads).to(self.device)
        cal = self.out / "calibration.json"
        if calibrated and cal.is_file():
            rec = read_json(cal)
            gc.set_calibration(rec["calib"])
            gc.log_priors.copy_(torch.tensor(rec["log_priors"], dtype=torch.float64))
        return gc.eval()

    def has_baseline(self):
        return (self.out / "baseline" / "selected.json").is_file()

    def load_baseline(self):
        sel = read_json(self.out / "baseline" / "selected.json")
        ds = self.dataset("train")
        model = build_softmax(sel["arch"], ds.image_shape, ds.num_classes)
        model.load_state_dict(torch.load(sel["path"], map_location=self.device, weights_only=True))
        return model.to(self.device).eval()


def _select(trail: CheckpointTrail, metric: str) -> TrailEntry:
    return trail[-1] if metric == "last" else early_stop_select(trail, metric)


def _write_selection(dirpath, trail, entry, cfg: TrainConfig, metric):
    write_json(dirpath / "trail.json", {"tag": trail.tag, "arch": trail.arch, "entries": trail.records()})
    return write_json(dirpath / "selected.json", {
        "status": "complete", "arch": cfg.arch, "epoch": entry.epoch, "path": entry.path,
        "metric": metric, "metrics": entry.metrics, "config_hash": config_hash(cfg.as_dict())})


def _train_head_job(cfg_dict, out_dir, k, resume, device="cpu"):
    torch.set_num_threads(1)
    exp = Experiment(config_from_dict(cfg_dict), out_dir, device)
    return _train_one_head(exp, k, resume)


def _train_one_head(exp: Experiment, k, resume):
    cfg = exp.head_config(k)
    d = exp.head_dir(k)
    sel = d / "selected.json"
    if resume and sel.is_file() and read_json(sel).get("config_hash") == config_hash(cfg.as_dict()):
        return str(sel)
    train = exp.dataset("train")
    scored = class_partition(exp.dataset(exp.cfg.splits.select), k)
    trail = train_binary_head(class_partition(train, k), cfg, scored, ckpt_dir=d, resume=resume)
    entry = _select(trail, exp.cfg.select_metric)
    return str(_write_selection(d, trail, entry, cfg, exp.cfg.select_metric))


def cmd_train(exp: Experiment, which="all", resume=False, jobs=1, classes=None) -> RunManifest:
    """Train the K heads and/or the softmax baseline. Failures are isolated per job."""
    m = exp.manifest
    m.start("train")
    artifacts, errors = [], {}
    ks = list(range(exp.num_classes)) if classes is None else list(classes)
    if which in ("all", "heads"):
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {k: pool.submit(_train_head_job, exp.cfg.as_dict(), str(exp.out), k, resume,
                                          str(exp.device)) for k in ks}
                for k, fut in futures.items():
                    try:
                        artifacts.append(fut.result())
                    except Exception as exc:  # noqa: BLE001 - isolate per-head failures
                        errors[f"head_{k}"] = repr(exc)
        else:
            for k in ks:
                try:
                    artifacts.append(_train_one_head(exp, k, resume))
                except Exception as exc:  # noqa: BLE001
                    log.error("head %d failed: %s", k, traceback.format_exc())
                    errors[f"head_{k}"] = repr(exc)
    if which in ("all", "baseline") and exp.cfg.baseline is not None:
        try:
            artifacts.append(_train_baseline(exp, resume))
        except Exception as exc:  # noqa: BLE001
            log.error("baseline failed: %s", traceback.format_exc())
            errors["baseline"] = repr(exc)
    status = "complete" if not errors else ("partial" if artifacts else "failed")
    m.finish("train", status, artifacts, errors=errors)
    if status == "failed":
        raise StageError("train", f"all training jobs failed: {errors}")
    return m


def _train_baseline(exp: Experiment, resume):
    cfg = exp.cfg.baseline
    d = exp.out / "baseline"
    sel = d / "selected.json"
    if resume and sel.is_file() and read_json(sel).get("config_hash") == config_hash(cfg.as_dict()):
        return str(sel)
    trail = train_softmax_baseline(exp.dataset("train"), cfg, exp.dataset(exp.cfg.splits.select),
                                   ckpt_dir=d, resume=resume)
    entry = _select(trail, exp.cfg.baseline_select_metric)
    return str(_write_selection(d, trail, entry, cfg, exp.cfg.baseline_select_metric))


def cmd_calibrate(exp: Experiment) -> dict:
    m = exp.manifest
    m.start("calibrate")
    gc = exp.load_classifier(calibrated=False)
    val = exp.dataset(exp.cfg.splits.calibrate)
    info = {}
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("always", CalibrationWarning)
        c = calibrate(gc, val, exp.cfg.calibration, info=info)
    record = {"calib": c, "log_priors": gc.log_priors.cpu().numpy(), "config_hash": exp.cfg.hash(),
              "calibration_config": exp.cfg.calibration.__dict__, "val_split": exp.cfg.splits.calibrate,
              "val_fingerprint": val.fingerprint(), **info}
    path = write_json(exp.out / "calibration.json", record)
    m.finish("calibrate", "complete", [path], warnings=info.get("warnings", []))
    return record


def _eval_budget(exp: Experiment, eps=None) -> AttackBudget:
    e = exp.cfg.eval
    return AttackBudget(e.norm, e.epsilon if eps is None else eps, e.steps, e.step_size, True, e.restarts)


def cmd_eval(exp: Experiment) -> dict:
    """Standard/robust accuracy and epsilon sweeps for the generative classifier and the baseline."""
    m = exp.manifest
    m.start("eval")
    e = exp.cfg.eval
    test = exp.dataset(exp.cfg.splits.evaluate)
    budget = _eval_budget(exp)
    models = {"generative": (exp.load_classifier(), {a: (a, budget) for a in e.generative_attacks})}
    if exp.has_baseline():
        models["softmax"] = (exp.load_baseline(), {"ce": ("ce", budget)})
    reports, rows, artifacts, curves = {}, [], [], {}
    bundle = bundle_hash(exp)
    for name, (model, attacks) in models.items():
        rep = evaluate(model, test, attacks, e.eps_grid, e.seed, e.batch_size)
        d = rep.as_dict()
        d["bundle_hash"] = bundle
        d["attack_config_hash"] = config_hash(d["attack_configs"])
        artifacts.append(write_json(exp.out / "reports" / f"eval_{name}.json", d))
        reports[name] = d
        for attack_id, curve in rep.sweeps.items():
            curves[f"{name} ({attack_id})"] = (curve.epsilons, curve.accuracies)
            rows += [{"model": name, "attack": attack_id, "epsilon": eps, "accuracy": acc}
                     for eps, acc in curve.rows()]
    artifacts.append(write_table(exp.out / "reports" / "sweep.csv", rows, SWEEP_COLUMNS))
    summary = [{"model": n, "attack": "none", "epsilon": 0.0, "accuracy": r["standard_accuracy"]}
               for n, r in reports.items()]
    summary += [{"model": n, "attack": k.split("@")[0], "epsilon": budget.epsilon, "accuracy": v}
                for n, r in reports.items() for k, v in r["robust_accuracy"].items()]
    artifacts.append(write_table(exp.out / "reports" / "accuracy.csv", summary, SWEEP_COLUMNS))
    if curves:
        artifacts.append(plot_sweep(curves, exp.out / "reports" / "sweep.png"))
    m.finish("eval", "complete", artifacts)
    return reports


def bundle_hash(exp: Experiment) -> str:
    parts = {}
    for k in range(exp.num_classes):
        sel = exp.head_dir(k) / "selected.json"
        if sel.is_file():
            parts[f"head_{k}"] = read_json(sel)
    cal = exp.out / "calibration.json"
    if cal.is_file():
        parts["calib"] = read_json(cal)["calib"]
    return config_hash(parts)


def feature_extractor(exp: Experiment) -> FeatureExtractor:
    x = exp.cfg.interpret.extractor
    if x.id == "flatten-pixels":
        return FeatureExtractor()
    if x.id == "external-inception":
        if not x.weights_path:
            raise ConfigurationError("external-inception needs interpret.extractor.weights_path")
        return InceptionFeatures(x.weights_path)
    path = exp.out / "extractor" / "classifier.pt"
    train = exp.dataset("train")
    model = seeded_init(lambda: build_softmax(x.arch, train.image_shape, train.num_classes),
                        exp.cfg.interpret.seed * 1000 + 998)
    if path.is_file():
        model.load_state_dict(torch.load(path, map_location=exp.device, weights_only=True))
    else:
        cfg = TrainConfig(epochs=x.epochs, batch_size=x.batch_size, lr=x.lr, eps_out=0.0, arch=x.arch,
                          seed=exp.cfg.interpret.seed, eval_interval=max(1, x.epochs), eval_eps=0.0)
        trail = train_softmax_baseline(train, cfg, model=model.to(exp.device))
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(trail[-1].state, path)
    return PenultimateFeatures(model.to(exp.device).eval())


def cmd_interpret(exp: Experiment, modes=("generate", "counterfactual")) -> list:
    """Image grids plus a FID table for generated samples and/or counterfactuals."""
    m = exp.manifest
    m.start("interpret")
    ic = exp.cfg.interpret
    train = exp.dataset("train")
    test = exp.dataset(exp.cfg.splits.evaluate)
    models = {"generative": exp.load_classifier()}
    if exp.has_baseline():
        models["softmax"] = exp.load_baseline()
    extractor = feature_extractor(exp)
    rows, artifacts = [], []
    K = train.num_classes
    for mode in modes:
        if mode not in ("generate", "counterfactual"):
            raise ConfigurationError(f"unknown interpret mode {mode!r}")
        for atk in ic.attacks:
            budget = generation_budget(atk.steps, atk.step_size, atk.epsilon)
            d = exp.out / "interpret" / mode / atk.label
            for k in range(K):
                real_k = train.images[train.labels == k]
                if mode == "generate":
                    stats = fit_class_gaussian(real_k.cpu())
                    start = sample_seeds(stats, ic.n_per_class, np.random.default_rng([ic.seed, k])).to(exp.device)
                else:
                    start = test.images[test.labels != k][: ic.n_per_class]
                artifacts.append(save_image_grid(start[: ic.grid_rows ** 2], d / f"inputs_class{k}.png", ic.grid_rows))
                ref = float(fid(extractor, real_k, start))
                for name, model in models.items():
                    if mode == "generate":
                        out = generate_class_samples(model, k, len(start), budget, seeds=start)
                        norms = (out - start).flatten(1).norm(dim=1)
                        flip = (model(out).argmax(1) == k).double().mean()
                    else:
                        cf = counterfactual(model, start, k, budget)
                        out, norms, flip = cf.images, cf.norms, cf.flipped.double().mean()
                    artifacts.append(save_image_grid(out[: ic.grid_rows ** 2], d / f"{name}_class{k}.png", ic.grid_rows))
                    rows.append({"mode": mode, "attack": atk.label, "model": name, "class": k,
                                 "extractor_id": extractor.extractor_id, "fid_reference": ref,
                                 "fid_output": float(fid(extractor, real_k, out)),
                                 "flip_rate": float(flip), "mean_norm": float(norms.mean())})
    artifacts.append(write_table(exp.out / "interpret" / "fid.csv", rows, FID_COLUMNS))
    m.finish("interpret", "complete", artifacts)
    return rows


def _ablation_config(base: TrainConfig, axis, value) -> TrainConfig:
    d = base.as_dict()
    key = {"capacity": "arch", "weight-decay": "weight_decay", "perturbation-size": "eps_out",
           "augmentation": "augment", "in-out-at": "eps_in"}[axis]
    d[key] = value if axis in ("capacity", "augmentation") else float(value)
    return TrainConfig.from_dict(d)


def cmd_ablate(exp: Experiment, axis=None, values=None) -> list:
    """Train one head per axis value and tabulate clean/adversarial AUROC on the evaluation split."""
    ac = exp.cfg.ablation
    axis = axis or ac.axis
    values = list(values if values is not None else ac.values)
    if axis is None:
        raise ConfigurationError("no ablation axis configured")
    m = exp.manifest
    stage = f"ablate:{axis}"
    m.start(stage)
    if axis == "calibration":
        rows, artifacts = _calibration_ablation(exp)
        m.finish(stage, "complete", artifacts)
        return rows
    k = ac.class_index
    train = exp.dataset("train")
    part = class_partition(train, k)
    scored = class_partition(exp.dataset(exp.cfg.splits.select), k)
    test = class_partition(exp.dataset(exp.cfg.splits.evaluate), k)
    budget = AttackBudget(exp.cfg.eval.norm, ac.eval_eps, ac.eval_steps, None, True, 1)
    base = exp.head_config(k)
    base.eval_eps = ac.eval_eps
    rows, trails, artifacts = [], {}, []
    d = exp.out / "ablation" / axis
    for value in values:
        cfg = _ablation_config(base, axis, value)
        trail = train_binary_head(part, cfg, scored, ckpt_dir=d / f"value_{value}")
        entry = _select(trail, exp.cfg.select_metric)
        head = trail.model
        final = (clean_auroc(head, test), adversarial_auroc(head, test, budget, seed=exp.cfg.eval.seed))
        head.load_state_dict(entry.state)
        rows.append({"axis": axis, "value": value, "class": k, "selected_epoch": entry.epoch,
                     "clean_auroc": clean_auroc(head, test),
                     "adv_auroc": adversarial_auroc(head, test, budget, seed=exp.cfg.eval.seed),
                     "final_clean_auroc": final[0], "final_adv_auroc": final[1]})
        trails[f"{axis}={value}"] = trail.records()
    artifacts.append(write_table(d / "table.csv", rows, ABLATION_COLUMNS))
    artifacts.append(plot_ablation(rows, axis, d / "auroc.png"))
    artifacts.append(plot_trails(trails, "adv-auroc", d / "trails_adv_auroc.png"))
    artifacts.append(plot_trails(trails, "clean-auroc", d / "trails_clean_auroc.png"))
    m.finish(stage, "complete", artifacts)
    return rows


def _calibration_ablation(exp: Experiment):
    gc = exp.load_classifier(calibrated=False)
    cal = exp.out / "calibration.json"
    if not cal.is_file():
        cmd_calibrate(exp)
    rec = read_json(cal)
    d = exp.out / "ablation" / "calibration"
    rows = []
    for split in ("train", exp.cfg.splits.evaluate):
        ds = exp.dataset(split)
        gc.set_calibration(np.zeros(gc.num_classes))
        before = standard_accuracy(gc, ds)
        gc.set_calibration(rec["calib"])
        rows.append({"split": split, "before": before, "after": standard_accuracy(gc, ds)})
    artifacts = [write_table(d / "accuracy.csv", rows, ["split", "before", "after"]),
                 write_table(d / "constants.csv", [{"class": k, "calib": float(c)} for k, c in enumerate(rec["calib"])],
                             ["class", "calib"])]
    test = exp.dataset(exp.cfg.splits.evaluate)
    scores = []
    for k, head in enumerate(gc.heads):
        s = head_scores(head, test.images)
        lab = test.labels.cpu().numpy()
        scores.append((s[lab == k], s[lab != k]))
    artifacts.append(plot_head_histograms(scores, d / "head_histograms.png"))
    return rows, artifacts


def cmd_report(exp: Experiment) -> str:
    """Plain-text summary of everything recorded in the manifest."""
    lines = [f"# {exp.cfg.name}", f"config hash: {exp.manifest.data.get('config_hash')}", ""]
    for name, st in sorted(exp.manifest.data["stages"].items()):
        lines.append(f"- {name}: {st.get('status')} ({len(st.get('artifacts', []))} artifacts)")
    for name in ("generative", "softmax"):
        p = exp.out / "reports" / f"eval_{name}.json"
        if p.is_file():
            r = read_json(p)
            robust = ", ".join(f"{k}: {v:.4f}" for k, v in r["robust_accuracy"].items())
            lines.append(f"{name}: standard {r['standard_accuracy']:.4f}; robust {robust}")
    missing = exp.manifest.missing_artifacts()
    if missing:
        lines.append(f"missing artifacts: {missing}")
    text = "\n".join(lines) + "\n"
    (exp.out / "report.md").write_text(text)
    return text


def run_all(exp: Experiment, resume=False, jobs=1):
    cmd_train(exp, resume=resume, jobs=jobs)
    cmd_calibrate(exp)
    cmd_eval(exp)
    cmd_interpret(exp)
    return cmd_report(exp)
