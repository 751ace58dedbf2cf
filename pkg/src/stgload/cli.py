"""Command-line runs: synth, train, evaluate, predict, robustness, interpret, gradcheck.

Settings come from a flat ``key = value`` file (``--config``) with flag
overrides. Every command writes only under ``out`` and leaves a
``manifest_<command>.json`` with the resolved settings and output hashes.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio, graph, interpret
from . import numerics as nx
from .model import (AttGcnModel, ModelConfig, load_model, load_state, read_checkpoint,
                    save_checkpoint, save_model)
from .train_eval import (BASELINES, TrainConfig, baseline_predict, make_baseline, metrics,
                         naive_forecast, node_slice, predict, train, write_metrics_csv)

log = logging.getLogger("stgload")

COMMANDS = ("synth", "train", "evaluate", "predict", "robustness", "interpret", "gradcheck")
ALL_VARIANTS = ("att_gcn", "plain_gcn", "gru", "fcnn", "naive")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int | None = None
    out: str = "runs/default"
    meter_csv: str = ""
    weather_csv: str = ""
    metadata_csv: str = ""
    buildings: str = ""  # comma-separated; empty means every building in meter_csv
    checkpoint: str = ""  # defaults to <out>/checkpoint.npz
    variant: str = "att_gcn"
    k: int = 0  # 0 picks max(2, ceil(N/4))
    emb_dim: int = 32
    T: int = 12
    M: int = 1
    max_gap: int = 24
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    dropout_p: float = 0.3
    channels: int = 16
    n_blocks: int = 4
    depth: int = 2
    att_dim: int = 32
    gru_dim: int = 16
    gru_layers: int = 2
    trials: int = 5
    n_clusters: int = 3
    buildings_per_cluster: int = 4
    length: int = 2000
    noise_sd: float = 0.05

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoint.npz"

    @property
    def building_ids(self) -> list[str]:
        return [b.strip() for b in self.buildings.split(",") if b.strip()]

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           dropout_p=self.dropout_p, seed=self.seed, T=self.T, M=self.M,
                           k=self.k or None, variant=self.variant)

    def model_config(self, n_features: int) -> ModelConfig:
        return ModelConfig(n_features=n_features, channels=self.channels, n_blocks=self.n_blocks,
                           depth=self.depth, att_dim=self.att_dim, gru_dim=self.gru_dim,
                           gru_layers=self.gru_layers, horizon=self.M, dropout_p=self.dropout_p,
                           emb_dim=self.emb_dim, k=self.k or None, variant=self.variant,
                           seed=self.seed)


_FIELD_TYPES = {"seed": int, **{f.name: {"int": int, "float": float, "str": str}.get(
    str(f.type).split(" ")[0], str) for f in fields(RunConfig) if f.name != "seed"}}


def _coerce(key: str, value: str):
    if key not in _FIELD_TYPES:
        raise UsageError(f"unknown config key {key!r}")
    try:
        return _FIELD_TYPES[key](value)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {value!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value.strip())
    for key in ("seed", "out", "variant", "buildings", "k"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    cfg = RunConfig(**values)
    if cfg.variant not in ALL_VARIANTS:
        raise UsageError(f"variant must be one of {ALL_VARIANTS}, got {cfg.variant!r}")
    if cfg.seed is None:
        if args.command != "gradcheck":
            raise UsageError("a seed is required (--seed or 'seed = ...' in the config)")
        cfg.seed = 0
    return cfg


# ------------------------------------------------------------------ helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: RunConfig, command: str, artifacts: Sequence[Path]) -> Path:
    out = Path(cfg.out)
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(cfg: RunConfig) -> dataio.BuildingDataset:
    for key in ("meter_csv", "weather_csv", "metadata_csv"):
        value = getattr(cfg, key)
        if not value:
            raise UsageError(f"{key} is not set")
        if not Path(value).exists():
            raise UsageError(f"{key} not found: {value}")
    ids = cfg.building_ids
    if not ids:
        import pandas as pd

        ids = sorted(pd.read_csv(cfg.meter_csv, usecols=["building_id"], dtype=str)["building_id"].unique())
    series = dataio.load_bdg2(cfg.meter_csv, cfg.weather_csv, cfg.metadata_csv, ids, cfg.max_gap)
    return dataio.build_dataset(series, cfg.max_gap)


def prepare_splits(ds: dataio.BuildingDataset, cfg: RunConfig):
    samples = dataio.make_windows(ds, cfg.T, cfg.M)
    if len(samples) < 3:
        raise UsageError(f"only {len(samples)} windows; need a longer record")
    train_s, val_s, test_s = dataio.split_chrono(samples)
    return tuple(dataio.stack_samples(s) for s in (train_s, val_s, test_s))


def _write_csv(path: Path, header: str, rows) -> Path:
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    return path


def load_predictor(cfg: RunConfig, ds: dataio.BuildingDataset):
    """Rebuild whatever ``train`` saved as a callable ``X -> Y_hat``."""
    path = cfg.checkpoint_path
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    header, arrays = read_checkpoint(path)
    kind, extra = header["kind"], header["extra"]
    if kind == "att_gcn_model":
        model, extra = load_model(path)
        if extra.get("building_ids") != ds.building_ids:
            # unseen building set: fresh embeddings from this data, shared weights reused
            emb = graph.init_embeddings(ds, model.cfg.emb_dim, model.cfg.seed).data
            model = model.with_embeddings(emb)
        return (lambda X: predict(model, X)), model
    if kind == "naive":
        return (lambda X: naive_forecast(X, header["config"]["M"])), None
    if kind == "baseline":
        conf = header["config"]
        ids = extra["building_ids"]
        missing = [b for b in ds.building_ids if b not in ids]
        if missing:
            raise UsageError(f"baseline checkpoint has no models for buildings {missing}")
        models = []
        for bid in ds.building_ids:
            i = ids.index(bid)
            m = make_baseline(conf["kind"], conf["T"], conf["d"], conf["M"], seed=conf["seed"] + i)
            params = m.named_parameters()
            load_state(params, {k: arrays[f"b{i}/{k}"] for k in params})
            models.append(m)
        return (lambda X: baseline_predict(models, X)), models
    raise UsageError(f"unrecognised checkpoint kind {kind!r}")


# ----------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> list[Path]:
    ds, labels = dataio.synth_generate(cfg.n_clusters, cfg.buildings_per_cluster, cfg.length,
                                       cfg.noise_sd, cfg.seed)
    sites = [f"site{l}" for l in labels]
    paths = list(dataio.write_bdg2(ds, cfg.out, sites).values())
    paths.append(_write_csv(Path(cfg.out) / "labels.csv", "building_id,label",
                            zip(ds.building_ids, labels.tolist())))
    return paths


def cmd_train(cfg: RunConfig) -> list[Path]:
    ds = load_dataset(cfg)
    (X_tr, Y_tr), (X_va, Y_va), _ = prepare_splits(ds, cfg)
    out = Path(cfg.out)
    tc = cfg.train_config()
    extra = {"building_ids": ds.building_ids}
    progress = lambda e, l, v: log.info("epoch %d/%d train_loss %.6g val_mse %.6g", e, cfg.epochs, l, v)
    if cfg.variant in ("att_gcn", "plain_gcn"):
        emb = graph.init_embeddings(ds, cfg.emb_dim, cfg.seed).data
        model = AttGcnModel(cfg.model_config(X_tr.shape[-1]), emb)
        model, hist = train(model, X_tr, Y_tr, X_va, Y_va, tc, progress)
        hist_path = out / "history.csv"
        hist.write_csv(hist_path)
        return [save_model(model, cfg.checkpoint_path, extra), hist_path]
    if cfg.variant == "naive":
        return [save_checkpoint(cfg.checkpoint_path, "naive", {"M": cfg.M}, {}, extra)]
    params, paths = {}, []
    for i, bid in enumerate(ds.building_ids):
        m = make_baseline(cfg.variant, cfg.T, X_tr.shape[-1], cfg.M, seed=cfg.seed + i)
        sub = TrainConfig(**{**tc.__dict__, "seed": cfg.seed + i})
        m, hist = train(m, *node_slice(X_tr, Y_tr, i), *node_slice(X_va, Y_va, i), sub, progress)
        paths.append(out / f"history_{bid}.csv")
        hist.write_csv(paths[-1])
        params.update({f"b{i}/{k}": p for k, p in m.named_parameters().items()})
    conf = {"kind": cfg.variant, "T": cfg.T, "d": int(X_tr.shape[-1]), "M": cfg.M, "seed": cfg.seed}
    return [save_checkpoint(cfg.checkpoint_path, "baseline", conf, params, extra)] + paths


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    ds = load_dataset(cfg)
    _, _, (X_te, Y_te) = prepare_splits(ds, cfg)
    forecast, _ = load_predictor(cfg, ds)
    report = metrics(forecast(X_te), Y_te, node_axis=2)
    path = Path(cfg.out) / "metrics.csv"
    write_metrics_csv(path, report, ds.building_ids)
    print(f"test mse={report.mse:.6g} mae={report.mae:.6g} r2={report.r2:.6g} smape={report.smape:.6g}")
    return [path]


def cmd_predict(cfg: RunConfig) -> list[Path]:
    ds = load_dataset(cfg)
    if ds.features.shape[0] < cfg.T:
        raise UsageError(f"need at least {cfg.T} hours of data to predict")
    forecast, _ = load_predictor(cfg, ds)
    window = ds.features[-cfg.T:][None]
    yhat = forecast(window)[0]  # (M, N, 1)
    last = ds.timestamps[-1]
    rows = []
    for step in range(yhat.shape[0]):
        stamp = str(last + np.timedelta64(step + 1, "h")).replace("T", " ") + ":00:00"
        for i, bid in enumerate(ds.building_ids):
            v = float(yhat[step, i, 0])
            rows.append((bid, stamp, v, float(ds.load_kwh(v, i))))
    return [_write_csv(Path(cfg.out) / "predictions.csv",
                       "building_id,timestamp,load_normalized,load_kwh", rows)]


def cmd_robustness(cfg: RunConfig) -> list[Path]:
    ds = load_dataset(cfg)
    _, _, (X_te, Y_te) = prepare_splits(ds, cfg)
    _, model = load_predictor(cfg, ds)
    if not isinstance(model, AttGcnModel):
        raise UsageError("robustness needs a graph-model checkpoint")
    rows = interpret.shuffle_robustness(model, X_te, Y_te, seed=cfg.seed, trials=cfg.trials)
    return [_write_csv(Path(cfg.out) / "robustness.csv", "ratio,mse,mae",
                       [(r.ratio, r.mse, r.mae) for r in rows])]


def cmd_interpret(cfg: RunConfig) -> list[Path]:
    ds = load_dataset(cfg)
    _, model = load_predictor(cfg, ds)
    if not isinstance(model, AttGcnModel):
        raise UsageError("interpret needs a graph-model checkpoint")
    out = Path(cfg.out)
    adj = model.adjacency()
    paths = list(graph.export_adjacency(adj, out, ds.building_ids))
    conn = interpret.connectivity_clusters(adj.filtered.data)
    feats = interpret.kmeans_features(ds)
    k_max = min(10, ds.n_nodes - 1)
    if k_max >= 2:
        best_k, score, scan = interpret.select_k_by_silhouette(feats, range(2, k_max + 1), cfg.seed)
        km = interpret.kmeans(feats, best_k, cfg.seed)
        paths.append(_write_csv(out / "silhouette.csv", "k,score", scan))
        ari = interpret.adjusted_rand_index(conn.labels, km.labels)
        print(f"connectivity clusters={conn.k} kmeans k*={best_k} silhouette={score:.4f} ARI={ari:.4f}")
        km_labels = km.labels.tolist()
    else:
        km_labels = [0] * ds.n_nodes
    paths.append(_write_csv(out / "clusters.csv", "building_id,connectivity_label,kmeans_label",
                            zip(ds.building_ids, conn.labels.tolist(), km_labels)))
    return paths


def tiny_gradcheck(seed: int = 0) -> nx.GradCheckReport:
    """Finite-difference check of every Att-GCN parameter on N=3, T=4, d=2, C=4, K=2.

    Targets sit near the model output (residual scale 0.1) so no gradient
    is so small that finite-difference roundoff swamps it.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_features=2, channels=4, n_blocks=2, depth=2, att_dim=4, gru_dim=4,
                      gru_layers=2, emb_dim=4, dropout_p=0.0, seed=seed)
    model = AttGcnModel(cfg, rng.standard_normal((3, 4)))
    x = rng.standard_normal((2, 4, 3, 2))
    y = model(x).data + 0.1 * rng.standard_normal((2, 1, 3, 1))
    named = model.named_parameters()

    def loss():
        diff = model(x) - y
        return nx.mean(diff * diff)

    return nx.gradient_check(loss, list(named.values()), names=list(named))


def cmd_gradcheck(cfg: RunConfig) -> list[Path]:
    report = tiny_gradcheck(cfg.seed)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    path = _write_csv(Path(cfg.out) / "gradcheck.csv", "parameter,max_rel_error",
                      report.per_param.items())
    print(f"max relative error {report.max_rel_error:.3e} over {len(report)} parameters")
    if report.max_rel_error >= 1e-4:
        raise RuntimeError(f"gradient check failed: max relative error {report.max_rel_error:.3e}")
    return [path]


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
    "robustness": cmd_robustness, "interpret": cmd_interpret, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgload", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--variant", choices=ALL_VARIANTS)
    parser.add_argument("--buildings", help="comma-separated building ids")
    parser.add_argument("--k", type=int, help="edges kept per node")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        artifacts = HANDLERS[args.command](cfg)
        write_manifest(cfg, args.command, artifacts)
    except UsageError as exc:
        print(f"stgload: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, KeyError) as exc:
        print(f"stgload: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic for anything else
        print(f"stgload: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())
