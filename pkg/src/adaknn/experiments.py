"""Experiment suites that regenerate the sweep, transfer, mismatch, ablation and timing tables.

Everything is regenerated from the config seeds, so two runs with the same
config produce identical tables (timing excepted).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .basemodel import Corpus, ToyEncoder, concat, fit_count_model, gen_corpus, make_task, token_table
from .bleu import corpus_bleu
from .config import ExperimentConfig
from .datastore import Datastore, IVFIndex, from_arrays, train_ivf
from .decode import Predictor, decode
from .metak import TrainResult, train_metak
from .scoring import (
    Retrieval,
    accuracy,
    adaptive_probs,
    meta_train_set,
    teacher_forced_retrieval,
    tune_lambda,
    uniform_probs,
    vanilla_probs,
)

log = logging.getLogger(__name__)

SWEEP_KS = (1, 2, 4, 8, 16, 32)
VARIANCE_KS = (4, 8, 16, 32)
TIMING_KS = (8, 16, 32)
TIMING_BATCHES = (1, 16, 32)
ABLATION_K = 8
ABLATION_MASKS = ("full", "no-counts", "no-distances")
ABLATION_SIZES = (100, 500, 2000)
ABLATION_HIDDEN = (4, 8, 32)


@dataclass
class Table:
    name: str
    header: list[str]
    rows: list[list] = field(default_factory=list)

    def add(self, *row) -> None:
        self.rows.append(list(row))

    @staticmethod
    def _fmt(value) -> str:
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    def to_tsv(self) -> str:
        lines = ["\t".join(self.header)]
        lines += ["\t".join(self._fmt(v) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cells = [self.header] + [[self._fmt(v) for v in row] for row in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.header))]
        out = [self.name]
        for n, row in enumerate(cells):
            out.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
            if n == 0:
                out.append("  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{self.name}.tsv").write_text(self.to_tsv())
        (directory / f"{self.name}.txt").write_text(self.to_text())

    def column(self, name: str) -> list:
        i = self.header.index(name)
        return [row[i] for row in self.rows]


def population_variance(values) -> float:
    return float(np.var(np.asarray(values, dtype=np.float64)))


class Suite:
    """Lazily built tasks, datastores and trained Meta-k networks, cached per key."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.check_seeds()
        self.cfg = cfg
        t = cfg.task
        self.general, domains = make_task(
            t.seed,
            vocab_size=t.vocab_size,
            n_domains=t.n_domains,
            src_per_domain=t.src_per_domain,
            src_overlap=t.src_overlap,
            tgt_per_domain=t.tgt_per_domain,
            tgt_overlap=t.tgt_overlap,
            share=t.share,
            peak=t.peak,
            n_alt=t.n_alt,
            noise_rate=t.noise_rate,
            branching=t.branching,
            prev_sensitivity=t.prev_sensitivity,
            min_len=t.min_len,
            max_len=t.max_len,
        )
        self.domains = {d.name: d for d in domains}
        e = cfg.encoder
        self.encoder = ToyEncoder(t.vocab_size, e.dim, e.window, e.seed, e.decay)
        self._corpora: dict[tuple[str, str], Corpus] = {}
        self._datastores: dict[str, Datastore] = {}
        self._indexes: dict[str, IVFIndex] = {}
        self._retrievals: dict[tuple[str, str, str, bool], Retrieval] = {}
        self._trained: dict[tuple, TrainResult] = {}
        self._vanilla: dict[tuple[str, int], float] = {}

    @property
    def domain_names(self) -> list[str]:
        return list(self.domains)

    def corpus(self, domain: str, split: str) -> Corpus:
        key = (domain, split)
        if key not in self._corpora:
            t = self.cfg.task
            if domain == "general":
                spec, n = self.general, t.n_general
            else:
                spec = self.domains[domain]
                n = {"train": t.n_train, "dev": t.n_dev, "test": t.n_test}[split]
            self._corpora[key] = gen_corpus(spec, n, split, t.seed)
        return self._corpora[key]

    @cached_property
    def base_model(self):
        b = self.cfg.base
        return fit_count_model(
            self.corpus("general", "train"),
            self.cfg.task.vocab_size,
            b.smoothing,
            self.cfg.encoder.window,
            b.use_source,
        )

    def datastore(self, domain: str) -> Datastore:
        if domain not in self._datastores:
            self._datastores[domain] = build_corpus_datastore(
                self.corpus(domain, "train"), self.encoder, self.cfg.task.vocab_size, self.cfg.datastore.metric
            )
        return self._datastores[domain]

    def index(self, domain: str) -> IVFIndex:
        if domain not in self._indexes:
            d = self.cfg.datastore
            ds = self.datastore(domain)
            self._indexes[domain] = train_ivf(ds, min(d.n_centroids, len(ds)), d.ivf_iters, d.ivf_seed)
        return self._indexes[domain]

    def nprobe(self, domain: str) -> int | None:
        n = self.cfg.datastore.nprobe
        return None if n <= 0 else n

    def retrieval(self, test_domain: str, split: str, ds_domain: str, exclude_self: bool = False) -> Retrieval:
        key = (test_domain, split, ds_domain, exclude_self)
        if key not in self._retrievals:
            nprobe = self.nprobe(ds_domain)
            self._retrievals[key] = teacher_forced_retrieval(
                self.corpus(test_domain, split),
                self.encoder,
                self.base_model,
                self.datastore(ds_domain),
                max(SWEEP_KS),
                self.index(ds_domain) if nprobe else None,
                nprobe,
                exclude_self,
            )
        return self._retrievals[key]

    def train(
        self,
        domain: str,
        K: int,
        hidden: int | None = None,
        mask: str | None = None,
        n_sentences: int | None = None,
    ) -> TrainResult:
        """Meta-k trained on ``domain``'s ``metak.train_split`` with neighbors from its own datastore."""
        m = self.cfg.metak
        hidden = hidden or m.hidden
        mask = mask or m.feature_mask
        key = (domain, K, hidden, mask, n_sentences)
        if key not in self._trained:
            split = m.train_split
            retr = self.retrieval(domain, split, domain, self.cfg.datastore.exclude_self and split == "train")
            if n_sentences is not None:
                retr = retr.head_sentences(n_sentences)
            train_set = meta_train_set(retr, K, self.cfg.knn.temperature, mask)
            self._trained[key] = train_metak(
                train_set,
                K,
                hidden,
                m.steps,
                m.batch_size,
                m.seed,
                feature_mask=mask,
                lr=m.lr,
                nonlinearity=m.nonlinearity,
                standardize=m.standardize,
            )
        return self._trained[key]

    def vanilla_lambda(self, domain: str, k: int) -> float:
        """Interpolation weight tuned on the dev set of ``domain`` against its own datastore."""
        key = (domain, k)
        if key not in self._vanilla:
            self._vanilla[key] = tune_lambda(self.retrieval(domain, "dev", domain), k, self.cfg.knn.temperature)[0]
        return self._vanilla[key]

    # scores on teacher-forced test retrievals, in percent

    def base_acc(self, retr: Retrieval) -> float:
        return accuracy(retr.base, retr.gold)

    def vanilla_acc(self, retr: Retrieval, tuned_on: str, k: int) -> float:
        return accuracy(vanilla_probs(retr, k, self.vanilla_lambda(tuned_on, k), self.cfg.knn.temperature), retr.gold)

    def uniform_acc(self, retr: Retrieval, K: int) -> float:
        return accuracy(uniform_probs(retr, K, self.cfg.knn.temperature), retr.gold)

    def adaptive_acc(self, retr: Retrieval, result: TrainResult) -> float:
        return accuracy(adaptive_probs(retr, result.params, self.cfg.knn.temperature), retr.gold)

    def predictor(self, variant: str, ds_domain: str, K: int, params=None, lam: float | None = None) -> Predictor:
        nprobe = self.nprobe(ds_domain)
        return Predictor(
            variant,
            self.base_model,
            self.encoder,
            ds=self.datastore(ds_domain),
            index=self.index(ds_domain) if nprobe else None,
            nprobe=nprobe,
            K=K,
            temperature=self.cfg.knn.temperature,
            lam=self.vanilla_lambda(ds_domain, K) if lam is None else lam,
            params=params,
            check=self.cfg.decode.check,
        )

    def bleu(self, predictor: Predictor, test_domain: str, n_sentences: int) -> float:
        corpus = self.corpus(test_domain, "test").head(n_sentences)
        d = self.cfg.decode
        hyps = decode(predictor, [s for s, _ in corpus.pairs], d.mode, d.beam, d.lenpen, d.batch_size)
        refs = [list(t[:-1]) for _, t in corpus.pairs]
        return corpus_bleu(hyps, refs).score


def build_corpus_datastore(corpus: Corpus, encoder: ToyEncoder, vocab_size: int, metric: str = "squared") -> Datastore:
    """One entry per target token: (encoded gold-prefix context, gold token)."""
    table = token_table(corpus, encoder.window)
    keys = encoder.encode_windows(table.src_windows, table.prefix_windows)
    if len(table) == 0:
        keys = np.zeros((0, encoder.dim), dtype=np.float32)
    return from_arrays(keys, table.gold, vocab_size, metric)


def run_sweep(suite: Suite, domains=None, bleu_sentences: int = 0) -> tuple[Table, Table]:
    """Per-K accuracy of vanilla / uniform / adaptive, and their variance over K >= 4."""
    domains = domains or suite.domain_names
    scores = Table("sweep", ["domain", "K", "base", "vanilla", "vanilla_lambda", "uniform", "adaptive"])
    if bleu_sentences:
        scores.header += ["bleu_base", "bleu_vanilla", "bleu_uniform", "bleu_adaptive"]
    var = Table("sweep_variance", ["domain", "variant", "variance_K_ge_4", "best"])
    for dom in domains:
        test = suite.retrieval(dom, "test", dom)
        base = suite.base_acc(test)
        per = {"vanilla": [], "uniform": [], "adaptive": []}
        for K in SWEEP_KS:
            v = suite.vanilla_acc(test, dom, K)
            u = suite.uniform_acc(test, K)
            result = suite.train(dom, K)
            a = suite.adaptive_acc(test, result)
            row = [dom, K, base, v, suite.vanilla_lambda(dom, K), u, a]
            if bleu_sentences:
                row += [
                    suite.bleu(suite.predictor(variant, dom, K, result.params), dom, bleu_sentences)
                    for variant in ("base", "vanilla", "uniform", "adaptive")
                ]
            scores.add(*row)
            for name, value in zip(per, (v, u, a)):
                per[name].append((K, value))
            log.info("sweep %s K=%d vanilla=%.2f uniform=%.2f adaptive=%.2f", dom, K, v, u, a)
        for name, values in per.items():
            tail = [s for K, s in values if K in VARIANCE_KS]
            var.add(dom, name, population_variance(tail), max(s for _, s in values))
    return scores, var


def run_transfer(suite: Suite, src: str, tgt: str, K: int = 32) -> Table:
    """Meta-k trained on ``src`` applied with ``tgt``'s datastore and test set."""
    test = suite.retrieval(tgt, "test", tgt)
    in_domain = suite.adaptive_acc(test, suite.train(tgt, K))
    transferred = suite.adaptive_acc(test, suite.train(src, K))
    table = Table("transfer", ["train_domain", "test_domain", "K", "vanilla", "adaptive_in_domain", "adaptive_transferred", "delta"])
    table.add(src, tgt, K, suite.vanilla_acc(test, tgt, K), in_domain, transferred, transferred - in_domain)
    return table


def run_mismatch(suite: Suite, test_domain: str, ds_domain: str, K: int = 32) -> Table:
    """Test sentences from one domain, datastore (and tuning data) from another."""
    table = Table("mismatch", ["test_domain", "datastore_domain", "K", "base", "vanilla", "adaptive", "vanilla_drop", "adaptive_drop"])
    result = suite.train(ds_domain, K)
    for test_dom in (ds_domain, test_domain):
        retr = suite.retrieval(test_dom, "test", ds_domain)
        base = suite.base_acc(retr)
        v = suite.vanilla_acc(retr, ds_domain, K)
        a = suite.adaptive_acc(retr, result)
        table.add(test_dom, ds_domain, K, base, v, a, base - v, base - a)
    return table


def best_vanilla(suite: Suite, domain: str) -> float:
    test = suite.retrieval(domain, "test", domain)
    return max(suite.vanilla_acc(test, domain, K) for K in SWEEP_KS)


def run_ablation(suite: Suite, domain: str, K: int = ABLATION_K) -> Table:
    test = suite.retrieval(domain, "test", domain)
    table = Table("ablation", ["domain", "K", "setting", "value", "adaptive", "best_vanilla"])
    ref = best_vanilla(suite, domain)
    for mask in ABLATION_MASKS:
        table.add(domain, K, "features", mask, suite.adaptive_acc(test, suite.train(domain, K, mask=mask)), ref)
    n_dev = suite.cfg.task.n_dev
    for size in ABLATION_SIZES:
        n = min(size, n_dev)
        table.add(domain, K, "train_sentences", n, suite.adaptive_acc(test, suite.train(domain, K, n_sentences=n)), ref)
    for hidden in ABLATION_HIDDEN:
        table.add(domain, K, "hidden", hidden, suite.adaptive_acc(test, suite.train(domain, K, hidden=hidden)), ref)
    return table


def run_timing(suite: Suite, domain: str, n_sentences: int, ks=TIMING_KS, batches=TIMING_BATCHES) -> Table:
    """Milliseconds per decoded sentence for every (variant, K) row and batch-size column."""
    d = suite.cfg.decode
    sources = [s for s, _ in suite.corpus(domain, "test").head(n_sentences).pairs]
    table = Table("timing", ["model", "K"] + [f"batch_{b}" for b in batches])

    def per_sentence(predictor, batch) -> float:
        start = time.perf_counter()
        decode(predictor, sources, d.mode, d.beam, d.lenpen, batch)
        return 1000.0 * (time.perf_counter() - start) / len(sources)

    base = [per_sentence(suite.predictor("base", domain, ks[0], lam=0.0), b) for b in batches]
    table.add("base", 0, *base)
    for variant in ("vanilla", "adaptive"):
        for K in ks:
            params = suite.train(domain, K).params if variant == "adaptive" else None
            pred = suite.predictor(variant, domain, K, params)
            table.add(variant, K, *[per_sentence(pred, b) for b in batches])
    return table


def timing_overheads(table: Table) -> Table:
    rows = {(r[0], r[1]): r[2:] for r in table.rows}
    out = Table("timing_overhead", ["K"] + [h + "_adaptive_over_vanilla" for h in table.header[2:]])
    for (model, K), vals in rows.items():
        if model == "adaptive" and ("vanilla", K) in rows:
            out.add(K, *[a / v for a, v in zip(vals, rows[("vanilla", K)])])
    return out
