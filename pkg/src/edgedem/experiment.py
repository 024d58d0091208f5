"""End-to-end experiment runner: association and allocation each round, then learning.

Each replication draws its own network, UE profiles and data from independent
seed streams, so switching the matching scheme leaves the learning streams
untouched and paired comparisons stay valid.
"""

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .datagen import (Dataset, PartitionSpec, build_generalization_pool, load_idx_archive, partition_manifest,
                      partition_noniid, synth_dataset)
from .demlearn import (GroupTree, ModelParams, TrainConfig, _data_loss_grad, accuracy, fedavg_round,
                       hierarchical_average, init_model, initial_tree, logistic_layout, mean_pairwise_distance,
                       mlp_layout, recluster, sgd)
from .exceptions import EdgeDemError
from .latency import VIRTUAL, draw_profiles
from .matching import (AssociationGame, baseline_one_sided, baseline_optimal, baseline_random, initial_association,
                       run_matching)
from .radio import generate_topology, link_table

SCHEMA_VERSION = "1.0"
CSV_COLUMNS = (
    "replication", "round", "matching", "learning", "system_delay_ms", "cumulative_delay_ms", "virtual_delay_ms",
    "swaps", "learned", "regional", "specialization_mean", "generalization_mean", "mean_model_distance",
    "n_groups", "per_sbs_delay_ms",
)
METRIC_COLUMNS = ("system_delay_ms", "cumulative_delay_ms", "swaps", "regional", "specialization_mean",
                  "generalization_mean", "mean_model_distance")


@dataclass
class RoundRecord:
    replication: int
    round: int
    matching: str
    learning: str
    system_delay_ms: float
    cumulative_delay_ms: float
    virtual_delay_ms: float
    swaps: int
    learned: bool
    regional: float
    specialization_mean: float
    generalization_mean: float
    mean_model_distance: float
    n_groups: int
    per_sbs_delay_ms: list = field(default_factory=list)
    groups: Optional[list] = None
    dendrogram: Optional[dict] = None

    def csv_row(self) -> list:
        row = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            if col == "per_sbs_delay_ms":
                v = ";".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = int(v)
            elif isinstance(v, float):
                v = repr(v)
            row.append(v)
        return row

    def json_dict(self) -> dict:
        d = {col: getattr(self, col) for col in CSV_COLUMNS}
        d["groups"] = self.groups
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


@dataclass
class ReplicationResult:
    replication: int
    records: list
    trace: list
    network_json: Optional[str] = None
    manifest: Optional[dict] = None
    error: Optional[dict] = None


# ---------------------------------------------------------------------------
# metrics


def evaluate_metrics(personal, regional, layout, per_ue_data, pool) -> dict:
    """Mean personal accuracy on own test shards and on the pooled test set, plus regional accuracy."""
    spec, gen = [], []
    for n, w in enumerate(personal):
        model = ModelParams(w, layout)
        own = per_ue_data[n].test
        if len(own):
            spec.append(accuracy(model, own))
        gen.append(accuracy(model, pool))
    return {
        "regional": accuracy(ModelParams(regional, layout), pool),
        "specialization": np.asarray(spec),
        "generalization": np.asarray(gen),
        "specialization_mean": float(np.mean(spec)) if spec else float("nan"),
        "generalization_mean": float(np.mean(gen)),
    }


# ---------------------------------------------------------------------------
# learners


class DemLearnTrainer:
    """Personalised training with group/regional proximal terms and regrouping every round."""

    def __init__(self, shards, layout, train: TrainConfig, model_cfg, seed_seq):
        self.shards, self.layout, self.train, self.model_cfg = shards, layout, train, model_cfg
        init_ss, *ue_ss = seed_seq.spawn(len(shards) + 1)
        self.rngs = [np.random.default_rng(s) for s in ue_ss]
        m0 = init_model(layout, np.random.default_rng(init_ss), model_cfg.init_scale)
        self.tree = initial_tree(m0, len(shards), min(model_cfg.n_groups, len(shards)))

    @property
    def personal(self):
        return self.tree.personal

    @property
    def regional(self):
        return self.tree.regional

    def step(self, assignment) -> GroupTree:
        tree = self.tree
        personal = np.stack([
            sgd(tree.personal[n], self.layout, self.shards[n].train, tree.ancestors(n), self.train, self.rngs[n])
            for n in range(tree.n_ues)
        ])
        # SBSs build partial group sums, the MBS completes group and regional models
        hierarchical_average(tree.with_personal(personal), assignment)
        feats = personal
        if self.model_cfg.cluster_features == "weights+grads":
            grads = [_data_loss_grad(personal[n], self.layout, *_xy_train(self.shards[n]))[1]
                     for n in range(tree.n_ues)]
            feats = np.hstack([personal, np.stack(grads)])
        self.tree = recluster(personal, tree.n_groups, self.model_cfg.linkage, self.layout, feats)
        return self.tree


class FedAvgTrainer:
    """Every UE starts from the global model, trains locally, and the server takes the size-weighted mean."""

    def __init__(self, shards, layout, train: TrainConfig, model_cfg, seed_seq):
        self.shards, self.layout = shards, layout
        self.train = TrainConfig(**{**asdict(train), "eta": 0.0})
        init_ss, *ue_ss = seed_seq.spawn(len(shards) + 1)
        self.rngs = [np.random.default_rng(s) for s in ue_ss]
        self.global_w = init_model(layout, np.random.default_rng(init_ss), model_cfg.init_scale).weights
        self.personal = np.tile(self.global_w, (len(shards), 1))
        self.sizes = np.array([len(s.train) for s in shards], dtype=float)

    @property
    def regional(self):
        return self.global_w

    def step(self, assignment=None):
        self.personal = np.stack([
            sgd(self.global_w, self.layout, self.shards[n].train, [], self.train, self.rngs[n])
            for n in range(len(self.shards))
        ])
        self.global_w = fedavg_round(self.personal, self.sizes)
        return None


def _xy_train(ds: Dataset):
    t = ds.train
    return t.features, t.labels


# ---------------------------------------------------------------------------
# one replication


def _seed_int(ss) -> int:
    return int(ss.generate_state(1)[0])


def _load_data(cfg: ExperimentConfig, seed: int) -> Dataset:
    d = cfg.data
    if d.source == "idx":
        return load_idx_archive(d.idx_images, d.idx_labels, d.n_classes)
    return synth_dataset(d.n_classes, d.input_dim, d.n_samples, seed, spread=d.spread, scale=d.scale,
                         offset=d.offset)


def _layout(cfg: ExperimentConfig, n_features: int):
    if cfg.model.kind == "mlp":
        return mlp_layout(n_features, cfg.model.hidden, cfg.data.n_classes)
    return logistic_layout(n_features, cfg.data.n_classes)


def _with_idx_split(data: Dataset, rng) -> Dataset:
    """IDX archives carry no split; hold out 20% at random."""
    mask = np.zeros(len(data), dtype=bool)
    mask[rng.permutation(len(data))[: int(round(0.2 * len(data)))]] = True
    return Dataset(data.features, data.labels, data.n_classes, data.index, mask)


class Replication:
    """State of one seeded replication: network, profiles, data and the learner."""

    def __init__(self, cfg: ExperimentConfig, rep: int, learn: bool = True):
        self.cfg, self.rep, self.learn = cfg, rep, learn
        net_ss, prof_ss, data_ss, learn_ss, match_ss = np.random.SeedSequence([cfg.run.seed, rep]).spawn(5)
        n, s = cfg.network.n_ues, cfg.network.n_sbs
        self.net = generate_topology(cfg.radio, n, s, _seed_int(net_ss))
        self.links = link_table(self.net, cfg.radio, cfg.network.virtual_rate)

        data_seed = _seed_int(data_ss)
        data = _load_data(cfg, data_seed)
        if cfg.data.source == "idx":
            data = _with_idx_split(data, np.random.default_rng(data_seed))
        self.spec = PartitionSpec(cfg.data.labels_per_ue, (cfg.data.samples_min, cfg.data.samples_max), data_seed)
        self.shards = partition_noniid(data, n, self.spec)
        self.pool = build_generalization_pool(self.shards)
        sizes = np.array([len(d.train) for d in self.shards], dtype=float)

        c = cfg.compute
        self.profile = draw_profiles(np.random.default_rng(prof_ss), n, sizes,
                                     cycles_range=(c.cycles_min, c.cycles_max),
                                     fmax_range=(c.fmax_min, c.fmax_max), f_min=c.f_min,
                                     model_kb_dist=c.model_kb_dist)
        alloc = "uniform" if cfg.scheme.matching in ("random", "uniform") else "optimal"
        self.game = AssociationGame(self.links, self.profile, cfg.budget, cfg.network.quota, alloc=alloc)
        self.match_rngs = match_ss
        self.matching = None

        self.layout = _layout(cfg, data.features.shape[1])
        trainer = DemLearnTrainer if cfg.scheme.learning == "demlearn" else FedAvgTrainer
        self.trainer = trainer(self.shards, self.layout, cfg.train, cfg.model, learn_ss) if learn else None

    def associate(self, t: int, trace: Optional[list]):
        scheme = self.cfg.scheme.matching
        swaps = 0
        if scheme == "proposal":
            sink = None
            if trace is not None:
                sink = lambda e: trace.append({"replication": self.rep, "round": t, **e})
            self.matching, _, stats = run_matching(self.game, self.matching, trace=sink)
            swaps = stats.swaps
        elif scheme == "random":
            self.matching = baseline_random(self.links, self.game.quotas, _seed_int(self.match_rngs.spawn(1)[0]))
        elif self.matching is None:
            if scheme == "uniform":
                self.matching = initial_association(self.links.rsrp, self.game.quotas)
            elif scheme == "one_sided":
                self.matching = baseline_one_sided(self.game)
            else:
                self.matching = baseline_optimal(self.game)
        return swaps

    def run(self, trace: Optional[list] = None):
        cfg = self.cfg
        records, cumulative = [], 0.0
        metrics = {"regional": math.nan, "specialization_mean": math.nan, "generalization_mean": math.nan}
        for t in range(1, cfg.train.rounds + 1):
            swaps = self.associate(t, trace)
            per_sbs = self.game.sbs_delays(self.matching)
            virt = [self.game.virtual_delay[u] for u in self.matching.members(VIRTUAL)]
            system = self.game.system_delay(self.matching)
            cumulative += system
            learned = self.learn and t % cfg.train.tau == 0
            distance, groups, dendro = math.nan, None, None
            if learned:
                tree = self.trainer.step(self.matching.assignment)
                metrics = evaluate_metrics(self.trainer.personal, self.trainer.regional, self.layout,
                                           self.shards, self.pool)
                distance = mean_pairwise_distance(self.trainer.personal)
                if tree is not None:
                    groups, dendro = [list(g) for g in tree.groups], tree.dendrogram
            records.append(RoundRecord(
                replication=self.rep, round=t, matching=cfg.scheme.matching, learning=cfg.scheme.learning,
                system_delay_ms=1e3 * system, cumulative_delay_ms=1e3 * cumulative,
                virtual_delay_ms=1e3 * float(max(virt, default=0.0)), swaps=swaps, learned=learned,
                regional=float(metrics["regional"]), specialization_mean=float(metrics["specialization_mean"]),
                generalization_mean=float(metrics["generalization_mean"]), mean_model_distance=distance,
                n_groups=len(groups) if groups else 0, per_sbs_delay_ms=(1e3 * per_sbs).tolist(),
                groups=groups, dendrogram=dendro,
            ))
        return records


def run_replication(cfg: ExperimentConfig, rep: int, learn: bool = True, trace: bool = False) -> ReplicationResult:
    events = [] if trace else None
    try:
        r = Replication(cfg, rep, learn)
        records = r.run(events)
        return ReplicationResult(rep, records, events or [], r.net.to_json(), partition_manifest(r.shards, r.spec))
    except EdgeDemError as exc:
        return ReplicationResult(rep, [], events or [], error={"replication": rep, "error": type(exc).__name__,
                                                               "message": str(exc)})


def run_experiment(cfg: ExperimentConfig, learn: bool = True, trace: Optional[bool] = None) -> list:
    """Run every replication; results come back sorted by replication index."""
    trace = cfg.output.trace_matching if trace is None else trace
    reps = range(cfg.run.replications)
    if cfg.run.workers > 1 and cfg.run.replications > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.workers) as pool:
            results = list(pool.map(run_replication, [cfg] * len(reps), reps, [learn] * len(reps),
                                    [trace] * len(reps)))
    else:
        results = [run_replication(cfg, r, learn, trace) for r in reps]
    return sorted(results, key=lambda r: r.replication)


# ---------------------------------------------------------------------------
# output


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=False, allow_nan=False)


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        w.writerow(rec.csv_row())
    return buf.getvalue()


def summarize(records, cfg: Optional[ExperimentConfig] = None, errors=()) -> dict:
    """Means and standard deviations of every metric column over all rows, and of final-round values."""
    cols, finals = {}, {}
    last = {}
    for rec in records:
        last[rec.replication] = rec
    for col in METRIC_COLUMNS:
        vals = np.array([getattr(r, col) for r in records], dtype=float)
        vals = vals[np.isfinite(vals)]
        cols[col] = {"mean": _clean(float(vals.mean())) if vals.size else None,
                     "std": _clean(float(vals.std())) if vals.size else None, "n": int(vals.size)}
        fin = np.array([getattr(r, col) for r in last.values()], dtype=float)
        fin = fin[np.isfinite(fin)]
        finals[col] = {"mean": _clean(float(fin.mean())) if fin.size else None,
                       "std": _clean(float(fin.std())) if fin.size else None, "n": int(fin.size)}
    out = {"schema_version": SCHEMA_VERSION, "rows": len(records), "replications": len(last),
           "columns": cols, "final_round": finals, "errors": list(errors)}
    if cfg is not None:
        out["config"] = cfg.to_dict()
    return out


def emit_results(results, out_dir, cfg: Optional[ExperimentConfig] = None) -> dict:
    """Write rounds.csv, rounds.jsonl, summary.json and the optional trace/cluster/network files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [rec for r in results for rec in r.records]
    paths = {"csv": out / "rounds.csv", "jsonl": out / "rounds.jsonl", "summary": out / "summary.json"}
    paths["csv"].write_text(records_csv(records))
    paths["jsonl"].write_text("".join(_dump(rec.json_dict()) + "\n" for rec in records))
    errors = [r.error for r in results if r.error]
    paths["summary"].write_text(json.dumps(summarize(records, cfg, errors), indent=2) + "\n")

    clusters = [{"replication": rec.replication, "round": rec.round, "groups": rec.groups, **rec.dendrogram}
                for rec in records if rec.dendrogram is not None]
    if clusters:
        paths["clusters"] = out / "clusters.jsonl"
        paths["clusters"].write_text("".join(_dump(c) + "\n" for c in clusters))
    trace = [e for r in results for e in r.trace]
    if cfg is not None and cfg.output.trace_matching:
        paths["trace"] = out / "matching_trace.jsonl"
        paths["trace"].write_text("".join(_dump(e) + "\n" for e in trace))
    nets = [r.network_json for r in results if r.network_json]
    if nets:
        paths["networks"] = out / "networks.jsonl"
        paths["networks"].write_text("".join(n + "\n" for n in nets))
    manifests = [{"replication": r.replication, **r.manifest} for r in results if r.manifest]
    if manifests:
        paths["manifest"] = out / "dataset_manifest.json"
        paths["manifest"].write_text(json.dumps({"replications": manifests}, indent=1) + "\n")
    return paths


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    n_values: list
    s_values: list
    mean_delay_ms: np.ndarray  # (len(n_values), len(s_values)), per-round system delay
    mean_total_delay_ms: np.ndarray  # cumulative delay over all rounds

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n_ues", "n_sbs", "mean_delay_ms", "mean_total_delay_ms"])
        for i, n in enumerate(self.n_values):
            for j, s in enumerate(self.s_values):
                w.writerow([n, s, repr(float(self.mean_delay_ms[i, j])), repr(float(self.mean_total_delay_ms[i, j]))])
        return buf.getvalue()


def sweep(cfg: ExperimentConfig, n_values, s_values, learn: bool = False) -> SweepResult:
    """Mean delays over a grid of UE and SBS counts, rows by N and columns by S."""
    n_values, s_values = [int(n) for n in n_values], [int(s) for s in s_values]
    mean = np.full((len(n_values), len(s_values)), np.nan)
    total = np.full_like(mean, np.nan)
    for i, n in enumerate(n_values):
        for j, s in enumerate(s_values):
            cell = cfg.replace(network={"n_ues": n, "n_sbs": s})
            results = run_experiment(cell, learn=learn, trace=False)
            recs = [rec for r in results for rec in r.records]
            failed = [r.error for r in results if r.error]
            if failed:
                raise EdgeDemError(f"sweep cell N={n}, S={s} failed: {failed[0]}")
            mean[i, j] = np.mean([rec.system_delay_ms for rec in recs])
            total[i, j] = np.mean([r.records[-1].cumulative_delay_ms for r in results])
    return SweepResult(n_values, s_values, mean, total)
