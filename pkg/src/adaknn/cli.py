"""Command-line entry point: ``adaknn <command> --config run.ini [--section.key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .basemodel import (
    EOS,
    ToyEncoder,
    fit_count_model,
    read_corpus,
    read_sequences,
    token_table,
    write_corpus,
    write_sequences,
)
from .bleu import corpus_bleu
from .config import ConfigError, ExperimentConfig, load_config
from .datastore import DatastoreError, check_index, load_datastore, load_index, save_datastore, save_index, train_ivf
from .decode import Predictor, decode
from .metak import load_checkpoint, save_checkpoint, train_metak
from .scoring import accuracy, adaptive_probs, meta_train_set, teacher_forced_retrieval, uniform_probs, vanilla_probs

log = logging.getLogger("adaknn")


class Workspace:
    """File layout under ``run.workdir``."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = cfg.workdir

    def corpus(self, domain: str, split: str) -> Path:
        return self.root / "data" / f"{domain}.{split}.txt"

    def datastore(self, domain: str) -> Path:
        return self.root / f"{domain}.ds"

    def index(self, domain: str) -> Path:
        return self.root / f"{domain}.ivf"

    def checkpoint(self, domain: str, K: int) -> Path:
        return self.root / f"{domain}.K{K}.metak"

    def loss_curve(self, domain: str, K: int) -> Path:
        return self.root / f"{domain}.K{K}.loss.tsv"

    def hypotheses(self, test_domain: str, split: str, variant: str, K: int) -> Path:
        return self.root / f"{test_domain}.{split}.{variant}.K{K}.hyp"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def _encoder(cfg: ExperimentConfig) -> ToyEncoder:
    e = cfg.encoder
    return ToyEncoder(cfg.task.vocab_size, e.dim, e.window, e.seed, e.decay)


def _base_model(cfg: ExperimentConfig, ws: Workspace):
    b = cfg.base
    general = read_corpus(ws.corpus("general", "train"))
    return fit_count_model(general, cfg.task.vocab_size, b.smoothing, cfg.encoder.window, b.use_source)


def _load_store(cfg: ExperimentConfig, ws: Workspace, domain: str):
    ds = load_datastore(ws.datastore(domain), cfg.datastore.metric)
    index = load_index(ws.index(domain))
    check_index(index, ds)
    nprobe = cfg.datastore.nprobe if cfg.datastore.nprobe > 0 else None
    return ds, (index if nprobe else None), nprobe


def cmd_gen_data(cfg: ExperimentConfig, args) -> None:
    suite = ex.Suite(cfg)
    ws = Workspace(cfg)
    (ws.root / "data").mkdir(parents=True, exist_ok=True)
    write_corpus(suite.corpus("general", "train"), ws.corpus("general", "train"))
    for dom in suite.domain_names:
        for split in ("train", "dev", "test"):
            corpus = suite.corpus(dom, split)
            write_corpus(corpus, ws.corpus(dom, split))
            print(f"{dom}.{split}: {len(corpus)} pairs, {corpus.n_target_tokens} target tokens")


def cmd_build_datastore(cfg: ExperimentConfig, args) -> None:
    ws = Workspace(cfg)
    dom = cfg.run.domain
    corpus = read_corpus(ws.corpus(dom, "train"))
    ds = ex.build_corpus_datastore(corpus, _encoder(cfg), cfg.task.vocab_size, cfg.datastore.metric)
    d = cfg.datastore
    index = train_ivf(ds, min(d.n_centroids, len(ds)), d.ivf_iters, d.ivf_seed)
    save_datastore(ds, ws.datastore(dom))
    save_index(index, ws.index(dom))
    print(f"datastore {dom}: {len(ds)} entries, dim {ds.dim}, {index.n_centroids} IVF lists")


def cmd_train(cfg: ExperimentConfig, args) -> None:
    ws = Workspace(cfg)
    dom, K, m = cfg.run.domain, cfg.knn.K, cfg.metak
    ds, index, nprobe = _load_store(cfg, ws, dom)
    split = m.train_split
    corpus = read_corpus(ws.corpus(dom, split), split)
    exclude = cfg.datastore.exclude_self and split == "train"
    retr = teacher_forced_retrieval(corpus, _encoder(cfg), _base_model(cfg, ws), ds, K, index, nprobe, exclude)
    train_set = meta_train_set(retr, K, cfg.knn.temperature, m.feature_mask)
    result = train_metak(
        train_set, K, m.hidden, m.steps, m.batch_size, m.seed,
        feature_mask=m.feature_mask, lr=m.lr, nonlinearity=m.nonlinearity, standardize=m.standardize,
    )
    path = Path(args.checkpoint) if args.checkpoint else ws.checkpoint(dom, K)
    save_checkpoint(result.params, path)
    ws.loss_curve(dom, K).write_text("step\tloss\n" + "".join(f"{i}\t{l:.6f}\n" for i, l in enumerate(result.losses)))
    first = result.losses[0] if result.losses else float("nan")
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained Meta-k K={K} H={m.hidden} on {len(train_set)} tokens: loss {first:.4f} -> {last:.4f}; wrote {path}")
    if result.n_clamped:
        print(f"warning: {result.n_clamped} samples hit the log floor", file=sys.stderr)


def _predictor(cfg: ExperimentConfig, ws: Workspace, args, check: bool = False) -> Predictor:
    dom, K, variant = cfg.run.domain, cfg.knn.K, cfg.decode.variant
    params = None
    ds = index = nprobe = None
    if variant != "base":
        ds, index, nprobe = _load_store(cfg, ws, dom)
    if variant == "adaptive":
        ckpt = Path(args.checkpoint) if args.checkpoint else ws.checkpoint(dom, K)
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        params = load_checkpoint(ckpt)
    return Predictor(
        variant, _base_model(cfg, ws), _encoder(cfg), ds=ds, index=index, nprobe=nprobe, K=K,
        temperature=cfg.knn.temperature, lam=cfg.knn.lam, params=params, check=check or cfg.decode.check,
    )


def cmd_decode(cfg: ExperimentConfig, args) -> None:
    ws = Workspace(cfg)
    pred = _predictor(cfg, ws, args)
    corpus = read_corpus(ws.corpus(cfg.test_domain, cfg.run.split), cfg.run.split)
    d = cfg.decode
    hyps = decode(pred, [s for s, _ in corpus.pairs], d.mode, d.beam, d.lenpen, d.batch_size)
    out = Path(args.output) if args.output else ws.hypotheses(cfg.test_domain, cfg.run.split, d.variant, cfg.knn.K)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sequences(hyps, out)
    print(f"decoded {len(hyps)} sentences ({d.variant}, {d.mode}) -> {out}")


def cmd_score(cfg: ExperimentConfig, args) -> None:
    """Teacher-forced token accuracy of the configured variant."""
    ws = Workspace(cfg)
    corpus = read_corpus(ws.corpus(cfg.test_domain, cfg.run.split), cfg.run.split)
    variant, K, T = cfg.decode.variant, cfg.knn.K, cfg.knn.temperature
    base = _base_model(cfg, ws)
    if variant == "base":
        table = token_table(corpus, cfg.encoder.window)
        probs, gold = base.batch_dist(table.src_windows, table.prefix_windows), table.gold
    else:
        ds, index, nprobe = _load_store(cfg, ws, cfg.run.domain)
        retr = teacher_forced_retrieval(corpus, _encoder(cfg), base, ds, K, index, nprobe)
        gold = retr.gold
        if variant == "vanilla":
            probs = vanilla_probs(retr, K, cfg.knn.lam, T)
        elif variant == "uniform":
            probs = uniform_probs(retr, K, T)
        else:
            ckpt = Path(args.checkpoint) if args.checkpoint else ws.checkpoint(cfg.run.domain, K)
            probs = adaptive_probs(retr, load_checkpoint(ckpt), T)
    print(f"accuracy\t{accuracy(probs, gold):.4f}\ttokens\t{len(gold)}")


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    ws = Workspace(cfg)
    ref_path = Path(args.references) if args.references else ws.corpus(cfg.test_domain, cfg.run.split)
    hyp_path = Path(args.hypotheses) if args.hypotheses else ws.hypotheses(
        cfg.test_domain, cfg.run.split, cfg.decode.variant, cfg.knn.K
    )
    hyps = read_sequences(hyp_path)
    if ref_path.suffix == ".txt" and "\t" in ref_path.read_text():
        refs = [list(t[t != EOS]) for _, t in read_corpus(ref_path).pairs]
    else:
        refs = read_sequences(ref_path)
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    exact = float(np.mean([h == r for h, r in zip(hyps, refs)])) if refs else 0.0
    res = corpus_bleu(hyps, refs)
    print(f"BLEU\t{res.score:.4f}")
    print("precisions\t" + "\t".join(f"{p:.4f}" for p in res.precisions))
    print(f"brevity_penalty\t{res.brevity_penalty:.4f}\thyp_len\t{res.hyp_len}\tref_len\t{res.ref_len}")
    print(f"exact_match\t{exact:.4f}")


def _emit(tables, ws: Workspace) -> None:
    for table in tables:
        table.write(ws.reports)
        print(table.to_text())


def cmd_sweep(cfg: ExperimentConfig, args) -> None:
    suite = ex.Suite(cfg)
    domains = [args.domains] if args.domains else None
    _emit(ex.run_sweep(suite, domains, bleu_sentences=args.bleu_sentences), Workspace(cfg))


def _other_domain(suite: ex.Suite, dom: str) -> str:
    return next(d for d in suite.domain_names if d != dom)


def cmd_transfer(cfg: ExperimentConfig, args) -> None:
    suite = ex.Suite(cfg)
    src = cfg.run.domain
    tgt = cfg.run.test_domain or _other_domain(suite, src)
    _emit([ex.run_transfer(suite, src, tgt, cfg.knn.K)], Workspace(cfg))


def cmd_mismatch(cfg: ExperimentConfig, args) -> None:
    suite = ex.Suite(cfg)
    ds_dom = cfg.run.domain
    test_dom = cfg.run.test_domain or _other_domain(suite, ds_dom)
    _emit([ex.run_mismatch(suite, test_dom, ds_dom, cfg.knn.K)], Workspace(cfg))


def cmd_ablate(cfg: ExperimentConfig, args) -> None:
    suite = ex.Suite(cfg)
    _emit([ex.run_ablation(suite, cfg.run.domain)], Workspace(cfg))


def cmd_timing(cfg: ExperimentConfig, args) -> None:
    suite = ex.Suite(cfg)
    table = ex.run_timing(suite, cfg.run.domain, cfg.run.timing_sentences)
    _emit([table, ex.timing_overheads(table)], Workspace(cfg))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-datastore": cmd_build_datastore,
    "train": cmd_train,
    "decode": cmd_decode,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "transfer": cmd_transfer,
    "mismatch": cmd_mismatch,
    "timing": cmd_timing,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaknn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI config file (seeds are mandatory)")
        for section, key, type_name, default in ExperimentConfig().items():
            p.add_argument(f"--{section}.{key}", dest=f"cfg:{section}.{key}", metavar=type_name.split()[0].upper())
        if name in ("train", "decode", "score"):
            p.add_argument("--checkpoint")
        if name == "decode":
            p.add_argument("--output")
        if name == "evaluate":
            p.add_argument("--hypotheses")
            p.add_argument("--references")
        if name == "sweep":
            p.add_argument("--domains", help="restrict the sweep to one domain")
            p.add_argument("--bleu-sentences", type=int, default=0, help="also report BLEU on this many test sentences")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    try:
        cfg = load_config(args.config, overrides)
        cfg.check_seeds()
        COMMANDS[args.command](cfg, args)
    except (ConfigError, DatastoreError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"adaknn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
