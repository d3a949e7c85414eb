"""Command-line entry point: train, eval, wltest, synth, theory, attack, classify.

Every command writes ``manifest.json`` (resolved config plus seed) into the
output directory; passing that manifest back through ``--config`` reruns the
command with identical CSV output.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (AttackConfig, BudgetError, ClassifierHead, accuracy, attack_set, results_csv,
                      summary_csv, train_classifier)
from .diffnum import no_grad
from .evaluation import (cosine_divergence, divergence_histogram, evaluate, isomorphic_brute_force, wl_test)
from .graphdata import (FormatError, Graph, GraphSet, IngestionError, SpecError, SyntheticSpec,
                        load_tu_dataset, make_synthetic, protein_like_dataset, sample_subgraphs,
                        special_structure_suite, split, with_degree_features, write_tu_dataset)
from .layers import ConfigError
from .models import (GraphAutoencoder, ModelConfig, branch_embeddings, encode, kernel_logits,
                     load_checkpoint, save_checkpoint)
from .theory import (PROVEN_INFEASIBLE, ConstraintSystem, brute_force_feasibility, check_lemma_2_2,
                     dimension_sweep, enumerate_sign_systems, sweep_csv)
from .training import DivergenceError, TraceSpec, suggest_config, train

log = logging.getLogger("crossgae")

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2
DIRECTED_MAX_DEGREE = 10
COMMANDS = ("train", "eval", "wltest", "synth", "theory", "attack", "classify")

DEFAULTS: dict = {
    "data": {
        "source": "protein-like",  # tu | protein-like | special | directed-subgraphs | synthetic
        "path": None,
        "name": "PROTEINS",
        "num_graphs": 64,
        "directed": False,
        "use_node_attributes": False,
        "degree_features": None,
        "host_nodes": 400,
        "host_edge_prob": 0.02,
        "subgraph_min": 14,
        "subgraph_max": 18,
    },
    "model": {
        "auto": False,
        "hidden_dim": 128,
        "pooling_ratios": [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 1.0],
        "skip_mode": "add",
        "kernel": "cross",
        "l2_temperature": 1.0,
        "l2_self": False,
    },
    "train": {"epochs": 200, "lr": 1e-3, "weight_decay": 1e-2, "self_loops": True, "trace_graph": None},
    "eval": {"checkpoint": None, "threshold": 0.5, "bins": 20},
    "classify": {"checkpoint": None, "mode": "finetune", "epochs": None, "lr": 1e-3, "train_fraction": 0.8,
                 "hidden": 64},
    "attack": {
        "checkpoint": None,
        "methods": ["random", "pgd", "cw"],
        "num_graphs": 20,
        "train_fraction": 0.8,
        "classifier_mode": "finetune",
        "classifier_epochs": None,
        "epsilon": 10.0,
        "step_size": 0.5,
        "steps": 50,
        "query_budget": 400,
        "c": 1.0,
        "k": 0.0,
        "finetune_steps": 0,
        "finetune_lr": 1e-3,
        "threshold": 0.5,
    },
    "theory": {"sweep_n": [3, 4], "cases": 64, "trials": 20},
    "wltest": {"pairs": 200, "max_n": 7},
    "synth": {"kind": "erdos-renyi", "n": 10, "edge_prob": 0.3, "count": 10, "feature_dim": 8, "name": "SYNTH"},
}


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


# config handling -------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def resolve_config(path: str | None, overrides: list[str]) -> tuple[dict, int | None]:
    """Defaults, then the config file (flat dotted or nested), then ``--set`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    seed = None
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from None
        if "command" in raw and "config" in raw:  # a manifest from an earlier run
            seed = raw.get("seed")
            raw = raw["config"]
        for key, value in _flatten(raw).items():
            _set_dotted(cfg, key, value)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_dotted(cfg, key.strip(), _parse_value(value))
    return cfg, seed


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def write_manifest(out: Path, command: str, cfg: dict, seed: int, outputs: list[str]) -> None:
    manifest = {"command": command, "version": __version__, "seed": seed, "config": cfg,
                "outputs": sorted(outputs)}
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# datasets and models ------------------------------------------------------------------

def load_data(dcfg: dict, seed: int) -> GraphSet:
    src = dcfg["source"]
    if src == "tu":
        if not dcfg["path"]:
            raise UsageError("data.path is required for data.source = tu")
        gs = load_tu_dataset(dcfg["path"], dcfg["name"], directed=bool(dcfg["directed"]),
                             use_node_attributes=bool(dcfg["use_node_attributes"]))
    elif src == "protein-like":
        gs = protein_like_dataset(seed=seed)
    elif src == "special":
        graphs = [g for g, _ in special_structure_suite(seed)]
        gs = GraphSet(graphs, graphs[0].feature_dim, name="special")
    elif src == "directed-subgraphs":
        host = make_synthetic(SyntheticSpec("directed-random", int(dcfg["host_nodes"]),
                                            float(dcfg["host_edge_prob"]), seed, 8))
        gs = sample_subgraphs(host, int(dcfg["num_graphs"] or 200),
                              (int(dcfg["subgraph_min"]), int(dcfg["subgraph_max"])), seed)
    else:
        raise UsageError(f"unknown data.source {src!r}")
    if dcfg["degree_features"] is not None:
        gs = with_degree_features(gs, int(dcfg["degree_features"]))
    elif src == "directed-subgraphs":
        # host features are sized for the host graph; subgraphs get their own degree one-hots
        gs = with_degree_features(gs, DIRECTED_MAX_DEGREE)
    k = dcfg["num_graphs"]
    if k is not None and src != "directed-subgraphs":
        gs = gs[: int(k)]
    if len(gs) == 0:
        raise UsageError("dataset is empty")
    return gs


def build_model_config(mcfg: dict, gs: GraphSet) -> ModelConfig:
    if mcfg["auto"]:
        return suggest_config(gs, kernel=mcfg["kernel"])
    return ModelConfig(input_dim=gs.feature_dim, hidden_dim=int(mcfg["hidden_dim"]),
                       pooling_ratios=list(mcfg["pooling_ratios"]), skip_mode=mcfg["skip_mode"],
                       kernel=mcfg["kernel"], l2_temperature=float(mcfg["l2_temperature"]),
                       l2_self=bool(mcfg["l2_self"]))


def _load_or_fail(path: str | None) -> GraphAutoencoder:
    if not path:
        raise UsageError("a checkpoint path is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return load_checkpoint(p)[0]


def _fmt(x: float) -> str:
    return repr(float(x))


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# commands ------------------------------------------------------------------------

def cmd_train(cfg: dict, out: Path, seed: int, workers: int) -> list[str]:
    gs = load_data(cfg["data"], seed)
    mc = build_model_config(cfg["model"], gs)
    model = GraphAutoencoder(mc, seed=seed)
    tcfg = cfg["train"]
    trace_id = tcfg["trace_graph"] if tcfg["trace_graph"] is not None else gs.graphs[0].id
    model, trace = train(model, gs, epochs=int(tcfg["epochs"]), lr=float(tcfg["lr"]), seed=seed,
                         trace_spec=TraceSpec(trace_id, embeddings=True, diagonal=True),
                         weight_decay=float(tcfg["weight_decay"]), self_loops=bool(tcfg["self_loops"]))
    save_checkpoint(model, out / "checkpoint.bin", extra={"dataset": gs.name, "seed": seed})
    _write(out / "loss_trace.csv", _csv(["epoch", "iteration", "graph_id", "loss"],
                                        [(e, i, g, _fmt(v)) for e, i, g, v in trace.iterations]))
    _write(out / "epoch_loss.csv", _csv(["epoch", "mean_loss"],
                                        [(e, _fmt(v)) for e, v in enumerate(trace.epoch_loss)]))
    _write(out / "diag_logits.csv", _csv(["iteration", "node", "logit"],
                                         [(it, k, _fmt(v)) for it, diag in trace.diagonal
                                          for k, v in enumerate(diag)]))
    emb_rows = []
    for it, p, q in trace.embeddings:
        for branch, mat in (("P", p), ("Q", q)):
            for node, row in enumerate(mat):
                emb_rows.append([it, branch, node, *(_fmt(v) for v in row)])
    dims = trace.embeddings[0][1].shape[1] if trace.embeddings else 0
    _write(out / "embedding_trace.csv", _csv(["iteration", "branch", "node", *[f"e{j}" for j in range(dims)]],
                                             emb_rows))
    return ["checkpoint.bin", "loss_trace.csv", "epoch_loss.csv", "diag_logits.csv", "embedding_trace.csv"]


def cmd_eval(cfg: dict, out: Path, seed: int, workers: int) -> list[str]:
    model = _load_or_fail(cfg["eval"]["checkpoint"])
    gs = load_data(cfg["data"], seed)
    if gs.feature_dim != model.config.input_dim:
        raise ConfigError(f"checkpoint expects feature dim {model.config.input_dim}, data has {gs.feature_dim}")
    th = float(cfg["eval"]["threshold"])
    report = evaluate(model, gs, th, bool(cfg["train"]["self_loops"]), workers=workers)
    _write(out / "report.json", report.to_json() + "\n")
    _write(out / "report.csv", report.to_csv())
    cos = []
    with no_grad():
        for g in gs:
            p, q = branch_embeddings(model, encode(model, g), g.directed)
            cos.append(cosine_divergence(p, q))
    _write(out / "divergence.csv", divergence_histogram(np.concatenate(cos), int(cfg["eval"]["bins"])))
    return ["report.json", "report.csv", "divergence.csv"]


def _random_pair(rng: np.random.Generator, max_n: int) -> tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(2, max_n + 1))
    a = np.triu((rng.random((n, n)) < 0.4).astype(np.int8), 1)
    a = a + a.T
    kind = rng.integers(3)
    if kind == 0:  # relabelled copy
        perm = rng.permutation(n)
        b = a[np.ix_(perm, perm)]
    elif kind == 1:  # same edge count, rewired
        iu = np.triu_indices(n, 1)
        bits = rng.permutation(a[iu])
        b = np.zeros_like(a)
        b[iu] = bits
        b = b + b.T
    else:
        b = np.triu((rng.random((n, n)) < 0.4).astype(np.int8), 1)
        b = b + b.T
    return a, b


def circulant(n: int, offsets: tuple[int, ...]) -> np.ndarray:
    a = np.zeros((n, n), dtype=np.int8)
    for i in range(n):
        for o in offsets:
            a[i, (i + o) % n] = a[(i + o) % n, i] = 1
    return a


def wl_blind_pair() -> tuple[np.ndarray, np.ndarray]:
    """Two 4-regular graphs on 8 nodes that 1-WL cannot tell apart but are not isomorphic."""
    return circulant(8, (1, 2)), circulant(8, (1, 3))


def cmd_wltest(cfg: dict, out: Path, seed: int, workers: int) -> list[str]:
    wcfg = cfg["wltest"]
    rng = np.random.default_rng(seed)
    rows, bad = [], 0
    for k in range(int(wcfg["pairs"])):
        a, b = _random_pair(rng, int(wcfg["max_n"]))
        wl, iso = wl_test(a, b), isomorphic_brute_force(a, b)
        bad += wl != iso
        rows.append([k, a.shape[0], int(a.sum() // 2), int(b.sum() // 2), int(wl), int(iso), int(wl == iso)])
    a, b = wl_blind_pair()
    rows.append(["blind", 8, int(a.sum() // 2), int(b.sum() // 2), int(wl_test(a, b)),
                 int(isomorphic_brute_force(a, b)), 0])
    _write(out / "wltest.csv", _csv(["pair", "n", "edges_a", "edges_b", "wl_pass", "isomorphic", "agree"], rows))
    if bad:
        raise InvariantViolation(f"wl_test disagreed with the isomorphism oracle on {bad} pairs")
    return ["wltest.csv"]


def cmd_synth(cfg: dict, out: Path, seed: int, workers: int) -> list[str]:
    s = cfg["synth"]
    graphs = []
    for k in range(int(s["count"])):
        spec = SyntheticSpec(s["kind"], int(s["n"]), float(s["edge_prob"]), seed + k, int(s["feature_dim"]), k)
        graphs.append(make_synthetic(spec))
    gs = GraphSet(graphs, int(s["feature_dim"]), name=s["name"])
    write_tu_dataset(gs, out, s["name"])
    return sorted(p.name for p in out.iterdir() if p.name.startswith(s["name"] + "_"))


def cmd_theory(cfg: dict, out: Path, seed: int, workers: int) -> list[str]:
    tcfg = cfg["theory"]
    trials = int(tcfg["trials"])
    rows, failures = [], []

    def record(name: str, got: str, expected: str):
        rows.append([name, got, expected, int(got == expected)])
        if got != expected:
            failures.append(name)

    neg = -np.ones((3, 3), dtype=np.int8)
    np.fill_diagonal(neg, 1)
    record("self n3 d1 all-negative", brute_force_feasibility(ConstraintSystem(neg, "self"), 1, trials, seed).status,
           PROVEN_INFEASIBLE)
    record("self n3 d2 all-negative", brute_force_feasibility(ConstraintSystem(neg, "self"), 2, trials, seed).status,
           "feasible")
    record("cross n3 d1 all-negative with diagonal",
           brute_force_feasibility(ConstraintSystem(-np.ones((3, 3)), "cross", True), 1, trials, seed).status,
           "feasible")
    n_ok = sum(brute_force_feasibility(cs, 2, trials, seed).feasible for cs in enumerate_sign_systems(3))
    record("self n3 d2 exhaustive", f"{n_ok}/64", "64/64")
    _write(out / "certificates.csv", _csv(["case", "verdict", "expected", "agree"], rows))

    lemma_rows = []
    for g, info in special_structure_suite(seed):
        for s in range(3):
            model = GraphAutoencoder(ModelConfig(g.feature_dim, 16, [1.0, 1.0, 1.0], kernel="self"), seed=seed + s)
            with no_grad():
                ok = check_lemma_2_2(lambda h: encode(model, h).Z.data, g, info)
            lemma_rows.append([g.id, s, int(ok)])
            if not ok:
                failures.append(f"twin embeddings differ on graph {g.id}")
    _write(out / "lemma.csv", _csv(["graph_id", "init", "twins_identical_and_linked"], lemma_rows))

    sweep = []
    for n in tcfg["sweep_n"]:
        sweep += dimension_sweep(int(n), int(tcfg["cases"]), seed, trials)
    _write(out / "sweep.csv", sweep_csv(sweep))
    if failures:
        raise InvariantViolation("; ".join(failures))
    return ["certificates.csv", "lemma.csv", "sweep.csv"]


def _ae_for(cfg: dict, section: str, gs: GraphSet, seed: int) -> GraphAutoencoder:
    path = cfg[section]["checkpoint"]
    if path:
        model = _load_or_fail(path)
        if model.config.input_dim != gs.feature_dim:
            raise ConfigError(f"checkpoint expects feature dim {model.config.input_dim}, data has {gs.feature_dim}")
        return model
    model = GraphAutoencoder(build_model_config(cfg["model"], gs), seed=seed)
    t = cfg["train"]
    train(model, gs, epochs=int(t["epochs"]), lr=float(t["lr"]), seed=seed,
          weight_decay=float(t["weight_decay"]), self_loops=bool(t["self_loops"]))
    return model


def _labeled(gs: GraphSet) -> GraphSet:
    if any(g.label is None for g in gs):
        raise UsageError("this command needs graph labels")
    return gs


def cmd_classify(cfg: dict, out: Path, seed: int, workers: int) -> list[str]:
    c = cfg["classify"]
    gs = _labeled(load_data(cfg["data"], seed))
    tr, te = split(gs, float(c["train_fraction"]), seed)
    model = _ae_for(cfg, "classify", tr, seed)
    head = ClassifierHead(model.config.hidden_dim, gs.num_classes or 2, int(c["hidden"]), seed)
    rep = train_classifier(model, head, tr, c["epochs"], c["mode"], float(c["lr"]), seed, te)
    majority = max(np.mean([g.label == k for g in te]) for k in range(gs.num_classes or 2))
    _write(out / "classifier_loss.csv", _csv(["epoch", "loss"], [(e, _fmt(v)) for e, v in enumerate(rep.epoch_loss)]))
    _write(out / "classifier_report.csv", _csv(
        ["mode", "epochs", "train_accuracy", "test_accuracy", "test_majority_rate"],
        [[c["mode"], len(rep.epoch_loss), _fmt(rep.train_accuracy), _fmt(rep.test_accuracy), _fmt(majority)]]))
    return ["classifier_loss.csv", "classifier_report.csv"]


def cmd_attack(cfg: dict, out: Path, seed: int, workers: int) -> list[str]:
    a = cfg["attack"]
    # validated before any training so a bad budget fails fast
    acfg = AttackConfig(float(a["epsilon"]), float(a["step_size"]), int(a["steps"]), int(a["query_budget"]),
                        float(a["c"]), float(a["k"]), int(a["finetune_steps"]), float(a["finetune_lr"]),
                        float(a["threshold"]), seed)
    gs = _labeled(load_data(cfg["data"], seed))
    tr, te = split(gs, float(a["train_fraction"]), seed)
    model = _ae_for(cfg, "attack", tr, seed)
    head = ClassifierHead(model.config.hidden_dim, gs.num_classes or 2, int(cfg["classify"]["hidden"]), seed)
    train_classifier(model, head, tr, a["classifier_epochs"], a["classifier_mode"], seed=seed)
    targets = te[: int(a["num_graphs"])]
    results = attack_set(model, head, targets, acfg, tuple(a["methods"]), workers)
    for r in results:
        g = targets.graphs[[h.id for h in targets].index(r.graph_id)]
        if not 0.0 <= r.delta_edge <= 1.0:
            raise InvariantViolation(f"delta_edge {r.delta_edge} out of range on graph {g.id}")
        if r.method == "pgd" and any(v > acfg.epsilon for v in r.l1_trace):
            raise InvariantViolation(f"PGD left the L1 ball on graph {g.id}")
    _write(out / "attack_results.csv", results_csv(results))
    _write(out / "attack_summary.csv", summary_csv(results, accuracy(model, head, targets)))
    return ["attack_results.csv", "attack_summary.csv"]


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "wltest": cmd_wltest, "synth": cmd_synth,
            "theory": cmd_theory, "attack": cmd_attack, "classify": cmd_classify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossgae", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config (flat dotted keys or nested), or a manifest.json")
    parser.add_argument("--out", default="out", help="output directory (created if absent)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=1, help="per-graph threads for eval/attack")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--epochs", type=int, default=None, help="shortcut for train.epochs")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.epochs is not None:
            overrides.append(f"train.epochs={args.epochs}")
        cfg, manifest_seed = resolve_config(args.config, overrides)
        seed = args.seed if args.seed is not None else (manifest_seed if manifest_seed is not None else 0)
        workers = args.workers if args.command in ("eval", "attack") else 1
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        outputs = HANDLERS[args.command](cfg, out, seed, max(1, workers))
        write_manifest(out, args.command, cfg, seed, outputs)
    except (UsageError, IngestionError, FormatError, SpecError, ConfigError, BudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantViolation, DivergenceError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
