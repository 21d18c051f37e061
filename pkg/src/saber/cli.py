"""Command-line surface: reproducible stage-by-stage runs plus an
end-to-end pipeline on the synthetic benchmark."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from . import baselines, forge, inference, synth, training
from .config import ConfigError, load_config, write_manifest
from .model import LibraryTensors, ModelConfig, SaberModel, load_checkpoint, save_checkpoint
from .scorer import OracleConfig, ScoreRequest, make_scorer
from .seeding import derive_seed
from .store import load_store, save_store

log = logging.getLogger("saber")


def _setup_determinism() -> None:
    torch.set_num_threads(1)


def _store_path(cfg: dict, out: str, name: str | None = None) -> str:
    return os.path.join(out, name or os.path.basename(cfg["store"]["path"]))


def _oracle_cfg(cfg: dict) -> OracleConfig:
    s = cfg["scorer"]
    return OracleConfig(s["w_match"], s["w_sim"], s["w_red"], s["w_pos"])


def _scorer(cfg: dict, library, queries):
    return make_scorer(
        cfg["scorer"]["backend"],
        library,
        queries,
        oracle_cfg=_oracle_cfg(cfg),
        endpoint=cfg["scorer"]["endpoint"],
    )


def _model_config(cfg: dict, dim: int, max_seq: int, n_records: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        d=dim,
        n_layers=m["n_layers"],
        n_heads=m["n_heads"],
        task_layers=tuple(m["task_layers"]),
        alpha_init=m["alpha_init"],
        max_seq=max_seq,
        t_floor=m["t_floor"],
        fusion_mode=cfg["fusion"]["mode"],
        elementwise_gate=cfg["fusion"]["elementwise"],
        n_records=n_records,
        ternary_theta=cfg["fusion"]["theta"],
    )


# ---- stage implementations ----


def cmd_synth(cfg: dict, out: str) -> list[str]:
    s = cfg["synth"]
    library, inst = synth.make_synthetic_store(
        demos=s["demos"],
        tasks=s["tasks"],
        dim=s["dim"],
        seed=derive_seed(cfg["seed"], "synth"),
        img_noise=s["img_noise"],
        q_noise=s["q_noise"],
        qr_style=s["qr_style"],
    )
    path = _store_path(cfg, out)
    save_store(library, [], path, inst=inst)
    print(f"synth: wrote {len(library)} demos to {path}")
    return [path]


def cmd_cluster(cfg: dict, out: str) -> list[str]:
    src = _store_path(cfg, out)
    library, _, inst = load_store(src)
    ids = library.ids()
    points = np.stack([library[i].img for i in ids])
    f = cfg["forge"]
    assign, centroids = forge.kmeans_partition(
        points, f["k"], derive_seed(cfg["seed"], "cluster")
    )
    queries, remaining, _ = forge.select_query_set(library, assign, centroids, f["m"])
    # desk-scale pseudo-results: the r vector of one seeded-random library demo
    rng = np.random.default_rng(derive_seed(cfg["seed"], "pseudo"))
    rem_ids = remaining.ids()
    for q in queries:
        donor = remaining[rem_ids[int(rng.integers(len(rem_ids)))]]
        q.pseudo_r = donor.r
    path = os.path.join(out, "split.jsonl")
    save_store(remaining, queries, path, inst=inst)
    print(f"cluster: {len(queries)} queries split from {len(library)} records -> {path}")
    return [path]


def cmd_forge(cfg: dict, out: str) -> list[str]:
    split = os.path.join(out, "split.jsonl")
    library, queries, _ = load_store(split)
    f = cfg["forge"]
    fcfg = forge.ForgeConfig(
        k=f["k"], m=f["m"], N=f["N"], cand=f["cand"], beam=f["beam"],
        seed=derive_seed(cfg["seed"], "forge"),
    )
    scorer = _scorer(cfg, library, queries)
    seqs = forge.build_dataset(library, queries, scorer, fcfg)
    path = os.path.join(out, "dataset.jsonl")
    forge.save_dataset(seqs, fcfg.N, path)
    print(f"forge: wrote {len(seqs)} sequences to {path}")
    return [path]


def cmd_train(cfg: dict, out: str) -> list[str]:
    split = os.path.join(out, "split.jsonl")
    library, queries, inst = load_store(split)
    if inst is None:
        raise RuntimeError("store has no instruction record")
    seqs, N = forge.load_dataset(os.path.join(out, "dataset.jsonl"), library)
    # 2N+3 positions: training needs N+3, and shot-count decoupling lets
    # generation reuse the checkpoint for up to 2N shots.
    mcfg = _model_config(cfg, library.dim, max_seq=2 * N + 3, n_records=len(library))
    model = SaberModel(mcfg)
    model.init_params(derive_seed(cfg["seed"], "init"))
    t = cfg["train"]
    tcfg = training.TrainConfig(
        lr=t["lr"], batch=t["batch"], epochs=t["epochs"],
        seed=derive_seed(cfg["seed"], "fit"),
        restart_period=t["restart_period"], restart_mult=t["restart_mult"],
    )
    w = training.LossWeights(cfg["loss"]["lambda1"], cfg["loss"]["lambda2"])
    log_path = os.path.join(out, "train_log.jsonl")
    history = training.fit(model, seqs, library, queries, inst, tcfg, w, log_path)
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(model, ckpt)
    print(f"train: {len(history)} epochs, final ce {history[-1]['ce']:.4f} -> {ckpt}")
    return [ckpt, log_path]


def cmd_generate(cfg: dict, out: str) -> list[str]:
    split = os.path.join(out, "split.jsonl")
    library, queries, inst = load_store(split)
    if inst is None:
        raise RuntimeError("store has no instruction record")
    model = load_checkpoint(os.path.join(out, "model.ckpt"))
    g = cfg["gen"]
    gcfg = inference.GenConfig(
        n=g["n"], decode=g["decode"], top_k=g["top_k"],
        temperature=g["temperature"], seed=derive_seed(cfg["seed"], "gen"),
    )
    scorer = _scorer(cfg, library, queries)
    lib_tensors = LibraryTensors.from_library(library)
    seqs = []
    for q in sorted(queries, key=lambda s: s.id):
        ex = inference.generate_sequence(model, library, q, inst, gcfg, lib_tensors)
        ex.score = scorer.score(ScoreRequest(q.id, tuple(ex.icd_ids)))
        seqs.append(ex)
    path = os.path.join(out, "generated.jsonl")
    forge.save_dataset(seqs, gcfg.n, path)
    mean = float(np.mean([s.score for s in seqs]))
    print(f"generate: {len(seqs)} sequences, mean score {mean:.4f} -> {path}")
    return [path]


def cmd_baseline(cfg: dict, out: str, method: str) -> list[str]:
    split = os.path.join(out, "split.jsonl")
    library, queries, _ = load_store(split)
    n = cfg["gen"]["n"]
    methods = baselines.standard_retrievers(
        library, n, derive_seed(cfg["seed"], "baseline")
    )
    methods["iqpr"] = lambda q: baselines.retrieve_iqpr(q, library, n)
    if method not in methods:
        raise ConfigError(f"unknown baseline {method!r} (have {sorted(methods)})")
    scorer = _scorer(cfg, library, queries)
    seqs = []
    for q in sorted(queries, key=lambda s: s.id):
        ids = methods[method](q)
        seqs.append(
            forge.SequenceExample(q.id, ids, scorer.score(ScoreRequest(q.id, tuple(ids))))
        )
    path = os.path.join(out, f"baseline_{method}.jsonl")
    forge.save_dataset(seqs, n, path)
    mean = float(np.mean([s.score for s in seqs]))
    print(f"baseline {method}: mean score {mean:.4f} -> {path}")
    return [path]


def cmd_compare(cfg: dict, out: str) -> list[str]:
    split = os.path.join(out, "split.jsonl")
    library, queries, inst = load_store(split)
    n = cfg["gen"]["n"]
    methods = baselines.standard_retrievers(
        library, n, derive_seed(cfg["seed"], "baseline")
    )
    ckpt = os.path.join(out, "model.ckpt")
    if os.path.exists(ckpt) and inst is not None:
        model = load_checkpoint(ckpt)
        lib_tensors = LibraryTensors.from_library(library)
        gcfg = inference.GenConfig(n=n, seed=derive_seed(cfg["seed"], "gen"))

        def saber_method(q):
            return inference.generate_sequence(
                model, library, q, inst, gcfg, lib_tensors
            ).icd_ids

        methods["saber"] = saber_method
    scorer = _scorer(cfg, library, queries)
    report = baselines.compare_methods(
        methods, queries, scorer,
        seed=derive_seed(cfg["seed"], "gap"),
        gap_trials=cfg["eval"]["gap_trials"],
    )
    json_path = os.path.join(out, "report.json")
    text_path = os.path.join(out, "report.txt")
    baselines.save_report(report, json_path, text_path)
    figures = baselines.render_report_figures(report, os.path.join(out, "report"))
    print(baselines.report_table(report))
    print(f"compare: report -> {json_path} (+ {len(figures)} figures)")
    return [json_path, text_path, *figures]


def cmd_perturb(cfg: dict, out: str, mode: str) -> list[str]:
    split = os.path.join(out, "split.jsonl")
    library, queries, _ = load_store(split)
    seqs, _n = forge.load_dataset(os.path.join(out, "generated.jsonl"), library)
    qmap = {q.id: q for q in queries}
    tpl = inference.BUILTIN_TEMPLATES[cfg["prompt"]["template"]]
    path = os.path.join(out, f"perturbed_{mode}.jsonl")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in seqs:
            trips = [
                inference.Triplet(
                    library[i].image_ref or i, library[i].text_q or "", library[i].text_r or ""
                )
                for i in ex.icd_ids
            ]
            perturbed = inference.perturb_sequence(
                trips, mode, seed=derive_seed(cfg["seed"], "perturb", ex.query_id)
            )
            fh.write(
                json.dumps(
                    {
                        "query": ex.query_id,
                        "mode": mode,
                        "triplets": [
                            {"image": t.image, "q": t.q, "r": t.r} for t in perturbed
                        ],
                    }
                )
                + "\n"
            )
    print(f"perturb {mode}: {len(seqs)} sequences -> {path}")
    _ = qmap, tpl
    return [path]


def cmd_gradcheck(cfg: dict, out: str) -> list[str]:
    from .gradharness import full_model_grad_check

    err = full_model_grad_check(seed=derive_seed(cfg["seed"], "gradcheck"))
    print(f"gradcheck: full-model max relative error {err:.3e}")
    if err >= 1e-3:
        raise RuntimeError(f"gradient check failed: {err:.3e} >= 1e-3")
    return []


def cmd_e2e(cfg: dict, out: str) -> list[str]:
    artifacts = []
    stages = [
        ("synth", lambda: cmd_synth(cfg, out)),
        ("cluster", lambda: cmd_cluster(cfg, out)),
        ("forge", lambda: cmd_forge(cfg, out)),
        ("train", lambda: cmd_train(cfg, out)),
        ("generate", lambda: cmd_generate(cfg, out)),
        ("compare", lambda: cmd_compare(cfg, out)),
    ]
    for name, fn in stages:
        try:
            artifacts.extend(fn())
        except Exception as e:
            raise RuntimeError(f"end-to-end pipeline failed at stage {name!r}: {e}") from e
    with open(os.path.join(out, "report.json"), "r", encoding="utf-8") as fh:
        report = json.load(fh)
    means = {m["name"]: m["mean"] for m in report["methods"] if "mean" in m}
    if "saber" in means:
        rs = means.get("rs", float("nan"))
        failed = []
        if not means["saber"] >= 1.15 * rs:
            failed.append(f"saber {means['saber']:.3f} < 1.15*rs {1.15 * rs:.3f}")
        for other in ("i2i", "iq2iq-ams", "iq2iq-jes"):
            if other in means and not means["saber"] > means[other]:
                failed.append(f"saber {means['saber']:.3f} <= {other} {means[other]:.3f}")
        if failed:
            raise RuntimeError("end-to-end benchmark checks failed: " + "; ".join(failed))
        print("e2e: benchmark checks passed")
    return artifacts


# ---- entry point ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saber",
        description="Demonstration-sequence selection pipeline",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="dotted-key config override (repeatable)",
    )
    parser.add_argument("--out", default="out", help="artifact directory")
    parser.add_argument("--seed", type=int, help="top-level seed override")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "cluster", "forge", "train", "generate", "compare",
                 "gradcheck", "e2e"):
        sub.add_parser(name)
    p_base = sub.add_parser("baseline")
    p_base.add_argument("method", help="rs | i2i | iq2iq-ams | iq2iq-jes | iqpr")
    p_pert = sub.add_parser("perturb")
    p_pert.add_argument(
        "mode", choices=inference.PERTURB_MODES,
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    _setup_determinism()
    try:
        cfg = load_config(args.config, args.set, args.seed)
    except (ConfigError, OSError, json.JSONDecodeError) as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    handlers = {
        "synth": lambda: cmd_synth(cfg, args.out),
        "cluster": lambda: cmd_cluster(cfg, args.out),
        "forge": lambda: cmd_forge(cfg, args.out),
        "train": lambda: cmd_train(cfg, args.out),
        "generate": lambda: cmd_generate(cfg, args.out),
        "baseline": lambda: cmd_baseline(cfg, args.out, args.method),
        "compare": lambda: cmd_compare(cfg, args.out),
        "perturb": lambda: cmd_perturb(cfg, args.out, args.mode),
        "gradcheck": lambda: cmd_gradcheck(cfg, args.out),
        "e2e": lambda: cmd_e2e(cfg, args.out),
    }
    try:
        outputs = handlers[args.command]()
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.error("%s failed: %s", args.command, e)
        return 1
    if outputs:
        manifest = os.path.join(args.out, f"{args.command}.manifest.json")
        inputs = [args.config] if args.config else []
        write_manifest(manifest, args.command, cfg, inputs, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
