"""Stage-oriented pipeline over one artifact directory.

Stages: ingest, train, train-encoders, build-index, calibrate, attack,
evaluate, report. Each stage writes its artifacts atomically, stamps them with
the config hash and seed, refuses stale prerequisites unless forced, and
appends timing and key metrics to ``logs/<stage>.log``. Only the log carries
wall-clock data, so reruns with the same config and seed produce byte-identical
artifacts and reports.
"""

from __future__ import annotations

import hashlib
import sys
import time
import zlib
from pathlib import Path

import numpy as np
import torch

from . import artifacts as art
from . import attacks as atk
from . import data as dat
from .config import RunConfig
from .detection import Detector, DetectionPolicy, build_index, calibrate
from .evaluation import evaluate_robustness, roc_points
from .models import build_classifier
from .training import adversarial_train, train_encoder

STAGES = ("ingest", "train", "train-encoders", "build-index", "calibrate",
          "attack", "evaluate", "report")


class Paths:
    def __init__(self, cfg: RunConfig):
        self.stage_dir = Path(cfg.stage_dir)
        self.data_dir = Path(cfg.data_dir)
        self.model = self.stage_dir / "model.ckpt"
        self.encoders_dir = self.stage_dir / "encoders"
        self.index = self.stage_dir / "index.bin"
        self.policy = self.stage_dir / "policy.json"
        self.attacks_dir = self.stage_dir / "attacks"
        self.reports_dir = self.stage_dir / "reports"
        self.report = self.stage_dir / "report.json"
        self.logs_dir = self.stage_dir / "logs"

    def encoder(self, tap: int) -> Path:
        return self.encoders_dir / f"encoder_{tap}.ckpt"

    def attack(self, attack_id: str) -> Path:
        return self.attacks_dir / f"{attack_id}.bin"

    def evaluation(self, attack_id: str) -> Path:
        return self.reports_dir / f"eval_{attack_id}.json"

    def roc(self, attack_id: str) -> Path:
        return self.reports_dir / f"roc_{attack_id}.csv"


class StageLog:
    """Appends timestamped lines to the stage log and mirrors them to stderr."""

    def __init__(self, path: Path, stage: str, quiet: bool = False):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(path, "a")
        self._stage = stage
        self._quiet = quiet

    def __call__(self, msg: str) -> None:
        stamp = time.strftime("%Y-%m-%d %H:%M:%S")
        self._f.write(f"{stamp} [{self._stage}] {msg}\n")
        self._f.flush()
        if not self._quiet:
            print(f"[{self._stage}] {msg}", file=sys.stderr)

    def close(self) -> None:
        self._f.close()


def _require(items: list[tuple[str, Path]]) -> None:
    missing = [f"{label} ({path})" for label, path in items if not path.exists()]
    if missing:
        raise art.MissingArtifactError(
            "missing prerequisite artifact(s): " + ", ".join(missing)
        )


def _check_fresh(meta: dict, cfg: RunConfig, force: bool, label: str) -> None:
    stamped = (meta.get("provenance") or {}).get("config_hash")
    if stamped is not None and stamped != cfg.config_hash and not force:
        raise art.StaleArtifactError(
            f"{label} was built with config hash {stamped}, current is "
            f"{cfg.config_hash}; rerun upstream stages or pass --force"
        )


def _provenance(cfg: RunConfig, inputs: dict[str, str] | None = None) -> dict:
    return {"config_hash": cfg.config_hash, "seed": cfg.seed,
            "dataset": cfg.dataset, "inputs": inputs or {}}


def _check_dataset(cfg: RunConfig, paths: Paths) -> dict:
    _require([("canonical dataset", paths.data_dir / "meta.json")])
    meta = dat.load_meta(paths.data_dir)
    if meta.get("dataset_id") != cfg.dataset:
        raise art.StaleArtifactError(
            f"canonical data holds dataset {meta.get('dataset_id')!r}, "
            f"config expects {cfg.dataset!r}"
        )
    return meta


def _train_subset(cfg: RunConfig, paths: Paths) -> dat.ImageBatch:
    ds = dat.load_split(paths.data_dir, "train")
    n = cfg.train.get("n_train") or len(ds)
    return ds.head(n).validate(cfg.model.get("num_classes", 10))


def _eval_subset(cfg: RunConfig, paths: Paths) -> dat.ImageBatch:
    ds = dat.load_split(paths.data_dir, "test")
    n = cfg.evaluate.get("n_eval") or len(ds)
    return ds.head(n).validate(cfg.model.get("num_classes", 10))


def _calibration_subset(cfg: RunConfig, paths: Paths) -> dat.ImageBatch:
    ds = dat.load_split(paths.data_dir, "calibration")
    n = cfg.calibrate.get("calibration_size") or len(ds)
    return ds.head(n).validate(cfg.model.get("num_classes", 10))


def _load_encoders(cfg: RunConfig, paths: Paths, force: bool):
    encoders = []
    for tap in cfg.encoders.get("layers", []):
        _require([(f"encoder for layer {tap}", paths.encoder(tap))])
        enc, meta = art.load_encoder(paths.encoder(tap))
        _check_fresh(meta, cfg, force, f"encoder {tap}")
        encoders.append(enc)
    return encoders


def _load_model(cfg: RunConfig, paths: Paths, force: bool):
    _require([("classifier checkpoint", paths.model)])
    model, meta = art.load_classifier(paths.model)
    _check_fresh(meta, cfg, force, "classifier checkpoint")
    return model


def stage_ingest(cfg: RunConfig, log, force: bool = False, *, source: str,
                 source_format: str = "idx") -> dict:
    meta = dat.ingest(source, cfg.dataset, paths_data := Path(cfg.data_dir),
                      seed=cfg.seed,
                      calibration_size=cfg.calibrate.get("calibration_size", 750),
                      source_format=source_format)
    log(f"ingested {cfg.dataset}: counts {meta['counts']}")
    return {"data_dir": str(paths_data), "counts": meta["counts"]}


def stage_train(cfg: RunConfig, log, force: bool = False) -> dict:
    paths = Paths(cfg)
    data_meta = _check_dataset(cfg, paths)
    train = _train_subset(cfg, paths)
    torch.manual_seed(cfg.seed)
    model = build_classifier(cfg.model.get("family", "mnist"),
                             cfg.model.get("num_classes", 10))
    log(f"training on {len(train)} samples, config hash {cfg.config_hash}")
    model = adversarial_train(model, train, cfg.train_config(), seed=cfg.seed, log=log)
    with torch.no_grad():
        acc = float((model(train.pixels[:2000]).argmax(1) == train.labels[:2000])
                    .float().mean())
    art.save_classifier(paths.model, model, _provenance(cfg, {
        "data": art.sha256_file(paths.data_dir / "train_pixels.npy"),
        "dataset_meta": data_meta["dataset_id"],
    }))
    log(f"saved classifier ({acc:.4f} train-subset accuracy) -> {paths.model.name}")
    return {"train_accuracy": acc, "model": str(paths.model)}


def stage_train_encoders(cfg: RunConfig, log, force: bool = False) -> dict:
    paths = Paths(cfg)
    _check_dataset(cfg, paths)
    model = _load_model(cfg, paths, force)
    train = _train_subset(cfg, paths)
    ecfg = cfg.encoder_train_config()
    latent_dim = cfg.encoders.get("latent_dim", 10)
    hidden = cfg.encoders.get("hidden", 128)
    out = {}
    for tap in cfg.encoders.get("layers", []):
        t0 = time.monotonic()
        result = train_encoder(model, tap, train, ecfg, latent_dim=latent_dim,
                               hidden=hidden, seed=cfg.seed * 131 + tap, log=log)
        art.save_encoder(paths.encoder(tap), result.encoder_decoder, _provenance(
            cfg, {"model": art.sha256_file(paths.model)}))
        last = result.history[-1]
        log(f"encoder {tap}: final j_ce {last['j_ce']:.4f} j_c {last['j_c']:.4f} "
            f"({time.monotonic() - t0:.1f}s) -> {paths.encoder(tap).name}")
        out[str(tap)] = last
    return out


def stage_build_index(cfg: RunConfig, log, force: bool = False) -> dict:
    paths = Paths(cfg)
    _check_dataset(cfg, paths)
    model = _load_model(cfg, paths, force)
    encoders = _load_encoders(cfg, paths, force)
    train = _train_subset(cfg, paths)
    index = build_index(model, encoders, train,
                        batch_size=cfg.index.get("batch_size", 256), log=log)
    inputs = {"model": art.sha256_file(paths.model)}
    inputs.update({f"encoder_{e.tap}": art.sha256_file(paths.encoder(e.tap))
                   for e in encoders})
    art.save_index(paths.index, index, _provenance(cfg, inputs))
    retained = {str(i): index.entries[i].retained for i in index.encoder_ids}
    log(f"index retained rows per encoder: {retained} -> {paths.index.name}")
    return {"retained": retained}


def _calibration_hash(batch: dat.ImageBatch) -> str:
    h = hashlib.sha256()
    h.update(batch.pixels.numpy().tobytes())
    h.update(batch.labels.numpy().tobytes())
    return h.hexdigest()


def stage_calibrate(cfg: RunConfig, log, force: bool = False) -> dict:
    paths = Paths(cfg)
    _check_dataset(cfg, paths)
    model = _load_model(cfg, paths, force)
    encoders = _load_encoders(cfg, paths, force)
    index, index_meta = art.load_index(paths.index)
    _check_fresh(index_meta, cfg, force, "latent index")
    cal = _calibration_subset(cfg, paths)
    policy = calibrate(model, encoders, index, cal,
                       percentile=cfg.calibrate.get("percentile", 0.98),
                       k=cfg.calibrate.get("k", 10),
                       mode=cfg.calibrate.get("mode", "aggregate"))
    art.write_json(paths.policy, {
        "kind": "policy",
        "k": policy.k,
        "mode": policy.mode,
        "percentile": policy.percentile,
        "aggregate_threshold": policy.aggregate_threshold,
        "encoder_thresholds": {str(i): t for i, t in
                               sorted(policy.encoder_thresholds.items())},
        "calibration_size": policy.calibration_size,
        "calibration_hash": _calibration_hash(cal),
        "provenance": _provenance(cfg, {"index": art.sha256_file(paths.index)}),
    })
    log(f"calibrated: aggregate tau {policy.aggregate_threshold}, "
        f"per-encoder {policy.encoder_thresholds} -> {paths.policy.name}")
    return {"aggregate_threshold": policy.aggregate_threshold,
            "encoder_thresholds": policy.encoder_thresholds}


def load_policy(path: Path) -> tuple[DetectionPolicy, dict]:
    raw = art.read_json(path)
    if raw.get("kind") != "policy":
        raise art.ArtifactError(f"{path}: expected a detection policy")
    policy = DetectionPolicy(
        k=raw["k"], mode=raw["mode"], percentile=raw["percentile"],
        aggregate_threshold=raw["aggregate_threshold"],
        encoder_thresholds={int(i): t for i, t in raw["encoder_thresholds"].items()},
        calibration_size=raw["calibration_size"],
    ).validate()
    return policy, raw


def _attack_ids(entry: dict) -> list[str]:
    name = entry["name"]
    if entry.get("method") == "adaptive" and "alpha2_values" in entry:
        return [f"{name}-a2-{v:g}" for v in entry["alpha2_values"]]
    return [name]


def _attack_seed(cfg: RunConfig, name: str) -> int:
    return cfg.seed * 100_003 + zlib.crc32(name.encode()) % 100_003


def stage_attack(cfg: RunConfig, log, force: bool = False,
                 name: str | None = None) -> dict:
    paths = Paths(cfg)
    _check_dataset(cfg, paths)
    model = _load_model(cfg, paths, force)
    eval_batch = _eval_subset(cfg, paths)
    out = {}
    for entry in cfg.attack_entries(name):
        acfg = cfg.attack_config(entry)
        n = min(entry.get("n_samples") or len(eval_batch), len(eval_batch))
        x = dat.ImageBatch(eval_batch.pixels[:n], eval_batch.labels[:n])
        seed = _attack_seed(cfg, entry["name"])
        t0 = time.monotonic()
        if acfg.method == "adaptive":
            encoders = _load_encoders(cfg, paths, force)
            index, index_meta = art.load_index(paths.index)
            _check_fresh(index_meta, cfg, force, "latent index")
            values = entry.get("alpha2_values", [acfg.alpha2])
            results = atk.adaptive_sweep(model, encoders, index, x, cfg=acfg,
                                         alpha2_values=values, seed=seed,
                                         sample_indices=range(n))
            for v, res in results.items():
                aid = f"{entry['name']}-a2-{v:g}" if "alpha2_values" in entry else entry["name"]
                _save_attack(cfg, paths, aid, entry, res, seed, log, alpha2=v)
                out[aid] = {"success_rate": float(res.success_mask.float().mean())}
        else:
            if acfg.method == "fgsm":
                res = atk.fgsm(model, x, epsilon=acfg.epsilon)
            elif acfg.method == "pgd":
                res = atk.pgd(model, x, cfg=acfg, seed=seed, sample_indices=range(n))
            else:
                res = atk.cw_l2(model, x, cfg=acfg)
            _save_attack(cfg, paths, entry["name"], entry, res, seed, log)
            out[entry["name"]] = {"success_rate": float(res.success_mask.float().mean())}
        log(f"attack {entry['name']}: {time.monotonic() - t0:.1f}s, "
            f"success {out[list(out)[-1]]['success_rate']:.3f} on {n} samples")
    return out


def _save_attack(cfg, paths, attack_id, entry, result, seed, log, alpha2=None):
    params = {k: v for k, v in entry.items() if k != "name"}
    if alpha2 is not None:
        params["alpha2"] = alpha2
        params.pop("alpha2_values", None)
    art.save_attack_result(paths.attack(attack_id), result, {
        "attack_id": attack_id, "params": params, "attack_seed": seed,
        "provenance": _provenance(cfg, {"model": art.sha256_file(paths.model)}),
    })
    log(f"  saved {paths.attack(attack_id).name}: success "
        f"{float(result.success_mask.float().mean()):.3f}, "
        f"max linf {float(result.linf.max()):.4f}")


def _assert_disjoint(cal: dat.ImageBatch, eval_batch: dat.ImageBatch) -> None:
    def row_hashes(b):
        return {hashlib.sha1(b.pixels[i].numpy().tobytes()).digest()
                for i in range(len(b))}

    overlap = row_hashes(cal) & row_hashes(eval_batch)
    if overlap:
        raise art.ArtifactError(
            f"calibration and evaluation sets overlap in {len(overlap)} samples"
        )


def stage_evaluate(cfg: RunConfig, log, force: bool = False,
                   name: str | None = None) -> dict:
    paths = Paths(cfg)
    _check_dataset(cfg, paths)
    model = _load_model(cfg, paths, force)
    encoders = _load_encoders(cfg, paths, force)
    _require([("latent index", paths.index), ("detection policy", paths.policy)])
    index, index_meta = art.load_index(paths.index)
    _check_fresh(index_meta, cfg, force, "latent index")
    policy, policy_raw = load_policy(paths.policy)
    _check_fresh(policy_raw, cfg, force, "detection policy")
    detector = Detector(model, encoders, index, policy)

    eval_batch = _eval_subset(cfg, paths)
    cal = _calibration_subset(cfg, paths)
    _assert_disjoint(cal, eval_batch)

    clean_scored = detector.score_batch(eval_batch.pixels)
    out = {}
    for entry in cfg.attack_entries(name):
        for aid in _attack_ids(entry):
            _require([(f"attack output {aid}", paths.attack(aid))])
            result, ameta = art.load_attack_result(paths.attack(aid))
            _check_fresh(ameta, cfg, force, f"attack output {aid}")
            adv_scored = detector.score_batch(result.adversarial.pixels)
            report = evaluate_robustness(
                detector, result, eval_batch, dataset_id=cfg.dataset,
                attack_id=aid, attack_params=ameta.get("params", {}),
                precomputed=(adv_scored, clean_scored),
            )
            payload = report.to_dict()
            payload["provenance"] = _provenance(cfg, {
                "attack": art.sha256_file(paths.attack(aid)),
                "policy": art.sha256_file(paths.policy),
                "index": art.sha256_file(paths.index),
                "model": art.sha256_file(paths.model),
            })
            art.write_json(paths.evaluation(aid), payload)
            adv_pred, _, adv_agg = adv_scored
            mis = adv_pred != result.adversarial.labels.numpy()
            if mis.any():
                fpr, tpr = roc_points(clean_scored[2], adv_agg[mis])
                lines = ["fpr,tpr"] + [f"{a:.10g},{b:.10g}" for a, b in zip(fpr, tpr)]
                art.atomic_write_bytes(paths.roc(aid), ("\n".join(lines) + "\n").encode())
            log(f"evaluated {aid}: base {report.base_accuracy:.4f} "
                f"robustness {report.robustness:.4f} auc {report.roc_auc:.4f} "
                f"fp {report.fp_rate:.4f}")
            out[aid] = {"base_accuracy": report.base_accuracy,
                        "robustness": report.robustness,
                        "roc_auc": report.roc_auc, "fp_rate": report.fp_rate}
    return out


def stage_report(cfg: RunConfig, log, force: bool = False) -> dict:
    paths = Paths(cfg)
    evaluations = []
    attack_hashes = {}
    for entry in cfg.attack_entries():
        for aid in _attack_ids(entry):
            path = paths.evaluation(aid)
            _require([(f"evaluation for {aid}", path)])
            payload = art.read_json(path)
            _check_fresh(payload, cfg, force, f"evaluation for {aid}")
            evaluations.append(payload)
            attack_hashes[aid] = art.sha256_file(paths.attack(aid))
    _require([("classifier checkpoint", paths.model),
              ("latent index", paths.index),
              ("detection policy", paths.policy)])
    report = {
        "kind": "report",
        "dataset_id": cfg.dataset,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "evaluations": sorted(evaluations, key=lambda e: e["attack_id"]),
        "artifacts": {
            "model": art.sha256_file(paths.model),
            "encoders": {str(t): art.sha256_file(paths.encoder(t))
                         for t in cfg.encoders.get("layers", [])},
            "index": art.sha256_file(paths.index),
            "policy": art.sha256_file(paths.policy),
            "attacks": dict(sorted(attack_hashes.items())),
        },
    }
    art.write_json(paths.report, report)
    log(f"wrote {paths.report} with {len(evaluations)} evaluations")
    return {"report": str(paths.report), "evaluations": len(evaluations)}


_STAGE_FNS = {
    "ingest": stage_ingest,
    "train": stage_train,
    "train-encoders": stage_train_encoders,
    "build-index": stage_build_index,
    "calibrate": stage_calibrate,
    "attack": stage_attack,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_stage(stage: str, cfg: RunConfig, *, force: bool = False,
              quiet: bool = False, **kwargs) -> dict:
    """Run one pipeline stage under the stage-directory lock."""
    if stage not in _STAGE_FNS:
        raise ValueError(f"unknown stage {stage!r}; stages are {STAGES}")
    paths = Paths(cfg)
    paths.stage_dir.mkdir(parents=True, exist_ok=True)
    with art.StageLock(paths.stage_dir):
        log = StageLog(paths.logs_dir / f"{stage}.log", stage, quiet=quiet)
        t0 = time.monotonic()
        log(f"start (seed {cfg.seed}, config hash {cfg.config_hash})")
        try:
            result = _STAGE_FNS[stage](cfg, log, force, **kwargs)
        except Exception as e:
            log(f"FAILED after {time.monotonic() - t0:.1f}s: {e}")
            log.close()
            raise
        log(f"done in {time.monotonic() - t0:.1f}s")
        log.close()
    return result


def run_pipeline(cfg: RunConfig, *, stages=None, force: bool = False,
                 quiet: bool = False) -> dict:
    """Run all post-ingest stages in order; returns per-stage summaries."""
    results = {}
    for stage in stages or [s for s in STAGES if s != "ingest"]:
        results[stage] = run_stage(stage, cfg, force=force, quiet=quiet)
    return results
