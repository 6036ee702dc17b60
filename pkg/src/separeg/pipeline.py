"""End-to-end runs: config, ledger, resumable stages, and run summaries.

A run is a directory: config.json (canonical), ledger.jsonl (append-only
stage events), the dataset, the region set, one checkpoint per stage, and
finally report.json / report.csv / report.png. Stages re-read their
inputs from disk, so a run can resume after any completed stage.

Nothing in a run directory carries timestamps; two runs from the same
config produce byte-identical reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .contrastive import AugmentationPolicy, PretrainConfig, pretrain_inter
from .distill import DistillConfig, TeacherBundle, distill, pretrain_intra
from .errors import ConfigError, StageError, ValidationError
from .finetune_eval import FinetuneConfig, MetricsReport, evaluate, finetune
from .imaging_io import (
    INTENSITY_SCALE,
    DatasetManifest,
    SyntheticSpec,
    Volume,
    extract_slices,
    generate_synthetic_dataset,
    load_volume,
    save_volume,
)
from .nets import Checkpoint, NetworkSpec, load_checkpoint
from .organcluster import ClusterModel, embed_regions, fit_cluster_model, split_region_set
from .superpixel import (
    RegionSetManifest,
    SlicConfig,
    build_region_set,
    build_regular_region_set,
    build_unseparated_region_set,
)

STAGES = ("separate", "pretrain", "cluster", "pretrain_intra", "distill", "finetune", "evaluate")
SEPARATIONS = ("sis", "regular", "none")
LOSS_MODES = ("both", "intra", "inter")
PROFILES = ("tiny", "full")
WINDOW = (0.0, float(INTENSITY_SCALE))


@dataclass
class DatasetSection:
    """Synthetic dataset shape and split sizes."""

    image_size: int = 32
    depth: int = 8
    n_organ_classes: int = 2
    shapes_per_image: int = 3
    intensity_ranges: Sequence[tuple[float, float]] = ((0.35, 0.50), (0.70, 0.85))
    noise_sigma: float = 0.05
    data_seed: int = 11
    n_volumes: int = 6
    n_pretrain: int = 3
    n_train: int = 1
    n_val: int = 1
    n_test: int = 1
    axis: int = 2

    def __post_init__(self):
        counts = (self.n_pretrain, self.n_train, self.n_val, self.n_test)
        if any(c < 1 for c in counts):
            raise ValidationError("every split needs at least one volume")
        if sum(counts) != self.n_volumes:
            raise ValidationError(
                f"split sizes {counts} must sum to n_volumes={self.n_volumes}"
            )
        self.intensity_ranges = [tuple(map(float, r)) for r in self.intensity_ranges]

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            image_size=self.image_size,
            n_organ_classes=self.n_organ_classes,
            shapes_per_image=self.shapes_per_image,
            intensity_ranges=self.intensity_ranges,
            noise_sigma=self.noise_sigma,
            seed=self.data_seed,
            depth=self.depth,
        )

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["intensity_ranges"] = [list(r) for r in self.intensity_ranges]
        return d


@dataclass
class ClusterSection:
    k: int = 5
    normalize: bool = True
    n_restarts: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.n_restarts < 1:
            raise ValidationError("n_restarts must be >= 1")

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class AblationSection:
    """Which variant of the pipeline a run exercises."""

    separation: str = "sis"  # sis | regular | none
    use_iid: bool = True
    loss: str = "both"  # both | intra | inter
    grid: int = 3  # tiles per side for separation=regular

    def __post_init__(self):
        if self.separation not in SEPARATIONS:
            raise ValidationError(f"separation must be one of {SEPARATIONS}")
        if self.loss not in LOSS_MODES:
            raise ValidationError(f"loss must be one of {LOSS_MODES}")
        if self.grid < 1:
            raise ValidationError("grid must be >= 1")

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def _build_section(cls, overrides: dict, name: str):
    try:
        return cls(**overrides)
    except TypeError as exc:
        raise ConfigError(f"bad keys in config section {name!r}: {exc}") from exc
    except ValidationError as exc:
        raise ConfigError(f"invalid config section {name!r}: {exc}") from exc


@dataclass
class RunConfig:
    """Everything one run needs; hashable canonically.

    The hash covers every field except out_dir, so the same experiment in
    two directories shares a hash while any parameter change gets a new
    one.
    """

    profile: str = "tiny"
    seed: int = 0
    out_dir: str = "runs/tiny"
    net: NetworkSpec = field(default_factory=NetworkSpec.tiny)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    slic: SlicConfig = field(default_factory=SlicConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    intra: PretrainConfig = field(default_factory=PretrainConfig)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    distill: DistillConfig = field(default_factory=DistillConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    ablation: AblationSection = field(default_factory=AblationSection)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValidationError(f"profile must be one of {PROFILES}")

    @classmethod
    def tiny(cls, seed: int = 0, out_dir: str = "runs/tiny", **section_overrides) -> "RunConfig":
        # iteration/epoch counts calibrated so the three-seed ablation
        # orderings hold on CPU in a few minutes; see tests/test_acceptance.py
        aug = AugmentationPolicy(out_size=32, blur_kernel=3)
        base = dict(
            profile="tiny",
            seed=seed,
            out_dir=out_dir,
            net=NetworkSpec.tiny(),
            dataset=DatasetSection(n_volumes=8, n_pretrain=3, n_train=1, n_val=1, n_test=3),
            slic=SlicConfig(n_centers=8),
            pretrain=PretrainConfig(iterations=800, batch_size=32, seed=seed, aug=aug),
            intra=PretrainConfig(iterations=400, batch_size=32, seed=seed, aug=aug),
            cluster=ClusterSection(k=2),
            distill=DistillConfig(iterations=200, batch_size=32, seed=seed, aug=aug),
            finetune=FinetuneConfig(epochs=80, batch_size=8, lr=5e-4, seed=seed, window=WINDOW),
            ablation=AblationSection(),
        )
        base.update(section_overrides)
        return cls(**base)

    @classmethod
    def full(cls, seed: int = 0, out_dir: str = "runs/full", **section_overrides) -> "RunConfig":
        aug = AugmentationPolicy(out_size=128, blur_kernel=9)
        base = dict(
            profile="full",
            seed=seed,
            out_dir=out_dir,
            net=NetworkSpec(),
            dataset=DatasetSection(
                image_size=128,
                depth=32,
                n_volumes=10,
                n_pretrain=6,
                n_train=2,
                n_val=1,
                n_test=1,
            ),
            slic=SlicConfig(n_centers=32),
            pretrain=PretrainConfig(iterations=100_000, batch_size=32, seed=seed, aug=aug),
            intra=PretrainConfig(iterations=100_000, batch_size=32, seed=seed, aug=aug),
            cluster=ClusterSection(k=5),
            distill=DistillConfig(iterations=100_000, batch_size=32, seed=seed, aug=aug),
            finetune=FinetuneConfig(epochs=200, batch_size=8, seed=seed, window=WINDOW),
            ablation=AblationSection(),
        )
        base.update(section_overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        profile = doc.get("profile", "tiny")
        if profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {profile!r}")
        seed = int(doc.get("seed", 0))
        out_dir = doc.get("out_dir", f"runs/{profile}")
        base = cls.tiny(seed=seed, out_dir=out_dir) if profile == "tiny" else cls.full(
            seed=seed, out_dir=out_dir
        )
        known = {
            "profile",
            "seed",
            "out_dir",
            "net",
            "dataset",
            "slic",
            "pretrain",
            "intra",
            "cluster",
            "distill",
            "finetune",
            "ablation",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def merged(section: str, current) -> dict:
            out = current.to_dict()
            override = doc.get(section, {})
            if not isinstance(override, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, value in override.items():
                if key not in out:
                    raise ConfigError(f"unknown key {key!r} in config section {section!r}")
                out[key] = value
            return out

        net = _build_section(NetworkSpec, merged("net", base.net), "net")
        dataset = _build_section(DatasetSection, merged("dataset", base.dataset), "dataset")
        slic = _build_section(SlicConfig, merged("slic", base.slic), "slic")

        def pretrain_like(section: str, current: PretrainConfig) -> PretrainConfig:
            d = merged(section, current)
            d["aug"] = _build_section(AugmentationPolicy, d["aug"], f"{section}.aug")
            return _build_section(PretrainConfig, d, section)

        pretrain = pretrain_like("pretrain", base.pretrain)
        intra = pretrain_like("intra", base.intra)
        cluster = _build_section(ClusterSection, merged("cluster", base.cluster), "cluster")
        d_distill = merged("distill", base.distill)
        d_distill["aug"] = _build_section(
            AugmentationPolicy, d_distill["aug"], "distill.aug"
        )
        distill_cfg = _build_section(DistillConfig, d_distill, "distill")
        d_ft = merged("finetune", base.finetune)
        d_ft["window"] = tuple(d_ft["window"])
        finetune_cfg = _build_section(FinetuneConfig, d_ft, "finetune")
        ablation = _build_section(AblationSection, merged("ablation", base.ablation), "ablation")
        return cls(
            profile=profile,
            seed=seed,
            out_dir=out_dir,
            net=net,
            dataset=dataset,
            slic=slic,
            pretrain=pretrain,
            intra=intra,
            cluster=cluster,
            distill=distill_cfg,
            finetune=finetune_cfg,
            ablation=ablation,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "net": self.net.to_dict(),
            "dataset": self.dataset.to_dict(),
            "slic": self.slic.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "intra": self.intra.to_dict(),
            "cluster": self.cluster.to_dict(),
            "distill": self.distill.to_dict(),
            "finetune": self.finetune.to_dict(),
            "ablation": self.ablation.to_dict(),
        }

    @property
    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("out_dir")
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )
        return path


class RunLedger:
    """Append-only JSON-lines record of stage events."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, event: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")

    def events(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [
            json.loads(line)
            for line in self.path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]

    def finished_stages(self, config_hash: str) -> set[str]:
        """Stages recorded completed or skipped under the given hash."""
        done = set()
        for e in self.events():
            if e.get("config_hash") != config_hash:
                continue
            if e.get("event") in ("stage_completed", "stage_skipped"):
                done.add(e["stage"])
        return done


def _skipped_stages(cfg: RunConfig) -> set[str]:
    if not cfg.ablation.use_iid:
        return {"cluster", "pretrain_intra", "distill"}
    return set()


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path.name}; run the {producer!r} stage first")
    return path


def _load_split(out: Path, tag: str) -> list[Volume]:
    manifest = DatasetManifest.load(_require(out / "dataset" / "dataset.json", "separate"))
    return [load_volume(p) for p in manifest.paths_for(tag)]


def _stage_separate(cfg: RunConfig, out: Path) -> None:
    data_dir = out / "dataset"
    data_dir.mkdir(parents=True, exist_ok=True)
    volumes = generate_synthetic_dataset(cfg.dataset.synthetic_spec(), cfg.dataset.n_volumes)
    manifest = DatasetManifest()
    bounds = np.cumsum(
        [cfg.dataset.n_pretrain, cfg.dataset.n_train, cfg.dataset.n_val, cfg.dataset.n_test]
    )
    for i, vol in enumerate(volumes):
        path = data_dir / f"vol_{i:03d}.svol"
        save_volume(vol, path)
        tag = ("pretrain", "train", "val", "test")[int(np.searchsorted(bounds, i, side="right"))]
        manifest.add(path, [tag])
    manifest.save(data_dir / "dataset.json")

    pretrain_vols = [v for i, v in enumerate(volumes) if i < cfg.dataset.n_pretrain]
    slices = []
    for vol in pretrain_vols:
        slices.extend(extract_slices(vol, axis=cfg.dataset.axis, normalize_window=WINDOW))
    if cfg.ablation.separation == "sis":
        build_region_set(slices, cfg.slic, shuffle_seed=cfg.seed, out_dir=out)
    elif cfg.ablation.separation == "regular":
        build_regular_region_set(slices, cfg.ablation.grid, shuffle_seed=cfg.seed, out_dir=out)
    else:
        build_unseparated_region_set(slices, shuffle_seed=cfg.seed, out_dir=out)


def _stage_pretrain(cfg: RunConfig, out: Path) -> None:
    manifest = RegionSetManifest.load(_require(out / "regions.jsonl", "separate"))
    pretrain_inter(manifest, cfg.net, cfg.pretrain, out, config_hash=cfg.config_hash)


def _stage_cluster(cfg: RunConfig, out: Path) -> None:
    manifest = RegionSetManifest.load(_require(out / "regions.jsonl", "separate"))
    inter = load_checkpoint(_require(out / "inter.ckpt", "pretrain"))
    embeddings = embed_regions(manifest, inter, out_size=cfg.pretrain.aug.out_size)
    model, labels = fit_cluster_model(
        embeddings,
        k=cfg.cluster.k,
        seed=cfg.seed,
        normalize=cfg.cluster.normalize,
        n_restarts=cfg.cluster.n_restarts,
    )
    model.save(out / "cluster.json")
    split_region_set(manifest, labels)


def _stage_pretrain_intra(cfg: RunConfig, out: Path) -> None:
    _require(out / "cluster.json", "cluster")
    subsets = [
        RegionSetManifest.load(_require(out / f"regions_cluster{j}.jsonl", "cluster"))
        for j in range(cfg.cluster.k)
    ]
    pretrain_intra(subsets, cfg.net, cfg.intra, out, config_hash=cfg.config_hash)


def _stage_distill(cfg: RunConfig, out: Path) -> None:
    manifest = RegionSetManifest.load(_require(out / "regions.jsonl", "separate"))
    inter = load_checkpoint(_require(out / "inter.ckpt", "pretrain"))
    _require(out / "cluster.json", "cluster")
    teachers = []
    for j in range(cfg.cluster.k):
        path = out / f"intra_{j}.ckpt"
        teachers.append(load_checkpoint(path) if path.exists() else None)
    bundle = TeacherBundle(inter=inter, intra=teachers)
    weights = {
        "both": (cfg.distill.w_intra, cfg.distill.w_inter),
        "intra": (cfg.distill.w_intra, 0.0),
        "inter": (0.0, cfg.distill.w_inter),
    }[cfg.ablation.loss]
    dcfg = dataclasses.replace(cfg.distill, w_intra=weights[0], w_inter=weights[1])
    distill(manifest, bundle, cfg.net, dcfg, out, config_hash=cfg.config_hash)


def _stage_finetune(cfg: RunConfig, out: Path) -> None:
    train = _load_split(out, "train")
    val = _load_split(out, "val")
    init_mode = cfg.finetune.init
    if init_mode == "random":
        encoder_init = None
    elif cfg.ablation.use_iid:
        encoder_init = load_checkpoint(_require(out / "student.ckpt", "distill"))
    else:
        encoder_init = load_checkpoint(_require(out / "inter.ckpt", "pretrain"))
    finetune(
        train,
        val,
        cfg.net,
        n_classes=cfg.dataset.n_organ_classes + 1,
        cfg=cfg.finetune,
        out_dir=out,
        encoder_init=encoder_init,
        config_hash=cfg.config_hash,
    )


def _stage_evaluate(cfg: RunConfig, out: Path) -> None:
    test = _load_split(out, "test")
    ckpt = load_checkpoint(_require(out / "finetuned.ckpt", "finetune"))
    report = evaluate(
        ckpt,
        test,
        window=cfg.finetune.window,
        axis=cfg.dataset.axis,
        config_hash=cfg.config_hash,
        seeds=[cfg.seed],
    )
    report.save(out / "report.json")
    report.to_csv(out / "report.csv")
    report.plot(out / "report.png")


_STAGE_FN = {
    "separate": _stage_separate,
    "pretrain": _stage_pretrain,
    "cluster": _stage_cluster,
    "pretrain_intra": _stage_pretrain_intra,
    "distill": _stage_distill,
    "finetune": _stage_finetune,
    "evaluate": _stage_evaluate,
}


def run(cfg: RunConfig, resume: bool = False, only: Optional[str] = None) -> Path:
    """Execute the pipeline (or one stage) in cfg.out_dir.

    Without ``resume`` the out_dir must not already hold a run. With it,
    completed stages recorded in the ledger are skipped, provided the
    stored config hash matches. ``only`` runs a single stage after
    checking its predecessors completed.
    """
    if only is not None and only not in STAGES:
        raise ConfigError(f"unknown stage {only!r}, expected one of {STAGES}")
    import torch

    # single-thread math keeps runs bit-reproducible across machines
    torch.set_num_threads(1)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ledger = RunLedger(out / "ledger.jsonl")
    existing = ledger.events()
    if existing:
        recorded_hash = existing[0].get("config_hash")
        if recorded_hash != cfg.config_hash:
            raise StageError(
                f"out_dir holds a run with config hash {recorded_hash}, "
                f"current config hashes to {cfg.config_hash}; refusing to mix runs"
            )

    skipped = _skipped_stages(cfg)
    done = ledger.finished_stages(cfg.config_hash)

    def init_run() -> None:
        if not existing:
            cfg.save(out / "config.json")
            ledger.append(
                {
                    "event": "run_started",
                    "config_hash": cfg.config_hash,
                    "profile": cfg.profile,
                    "seed": cfg.seed,
                }
            )

    if only is not None:
        preceding = STAGES[: STAGES.index(only)]
        missing = [s for s in preceding if s not in done and s not in skipped]
        if missing:
            raise StageError(
                f"stage {only!r} needs earlier stages {missing} to finish first"
            )
        if only in skipped:
            raise StageError(
                f"stage {only!r} is disabled by this config (use_iid=false)"
            )
        init_run()
        ledger.append({"event": "stage_started", "stage": only, "config_hash": cfg.config_hash})
        _STAGE_FN[only](cfg, out)
        ledger.append({"event": "stage_completed", "stage": only, "config_hash": cfg.config_hash})
        return out

    if existing and not resume:
        raise StageError(f"{out} already contains a run; pass resume to continue it")
    init_run()

    for stage in STAGES:
        if stage in skipped:
            if stage not in done:
                ledger.append(
                    {
                        "event": "stage_skipped",
                        "stage": stage,
                        "config_hash": cfg.config_hash,
                        "reason": "use_iid=false",
                    }
                )
                done.add(stage)
            continue
        if stage in done:
            continue
        ledger.append({"event": "stage_started", "stage": stage, "config_hash": cfg.config_hash})
        _STAGE_FN[stage](cfg, out)
        ledger.append({"event": "stage_completed", "stage": stage, "config_hash": cfg.config_hash})
        done.add(stage)
    return out / "report.json"


def _flatten(doc: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in doc.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            flat.update(_flatten(value, path))
        else:
            flat[path] = value
    return flat


def _config_diff(a: dict, b: dict) -> list[str]:
    fa, fb = _flatten(a), _flatten(b)
    keys = sorted(set(fa) | set(fb))
    return [k for k in keys if fa.get(k) != fb.get(k)]


# fields allowed to differ between runs that are aggregated together
_AGG_IGNORED = ("seed", "out_dir", "pretrain.seed", "intra.seed", "distill.seed", "finetune.seed")
_SWEEP_AXIS = "pretrain.iterations"


def summarize_runs(run_dirs: Sequence[str | Path], out_prefix: str | Path) -> dict:
    """Aggregate reports of several runs into a table, CSV, and plot.

    Runs may differ only in seed, or in seed plus pretrain iterations
    (which triggers an iteration-sweep plot). Any other difference is an
    error that lists the offending config fields.
    """
    if not run_dirs:
        raise ConfigError("no run directories given")
    loaded = []
    for d in run_dirs:
        d = Path(d)
        cfg_path = d / "config.json"
        rep_path = d / "report.json"
        if not cfg_path.exists():
            raise StageError(f"{d} has no config.json; not a run directory")
        if not rep_path.exists():
            raise StageError(f"{d} has no report.json; run its evaluate stage first")
        doc = json.loads(cfg_path.read_text(encoding="utf-8"))
        loaded.append((d, doc, MetricsReport.load(rep_path)))

    base_doc = loaded[0][1]
    sweep_values = set()
    for d, doc, _ in loaded[1:]:
        diff = [k for k in _config_diff(base_doc, doc) if k not in _AGG_IGNORED]
        if diff == [_SWEEP_AXIS] or diff == []:
            pass
        else:
            hard = [k for k in diff if k != _SWEEP_AXIS]
            raise ConfigError(
                f"runs {loaded[0][0]} and {d} differ beyond seed/sweep axis in: {hard}"
            )
    for _, doc, _ in loaded:
        sweep_values.add(_flatten(doc)[_SWEEP_AXIS])

    groups: dict[object, list[MetricsReport]] = {}
    for _, doc, rep in loaded:
        groups.setdefault(_flatten(doc)[_SWEEP_AXIS], []).append(rep)

    rows = []
    for iters in sorted(groups):
        reps = groups[iters]
        dscs = [r.aggregate["dsc_mean"] for r in reps]
        hds = [r.aggregate["hd95_mean"] for r in reps if r.aggregate["hd95_mean"] is not None]
        mean = float(np.mean(dscs))
        stderr = float(np.std(dscs, ddof=1) / np.sqrt(len(dscs))) if len(dscs) > 1 else 0.0
        rows.append(
            {
                "pretrain_iterations": iters,
                "n_runs": len(reps),
                "dsc_mean": mean,
                "dsc_stderr": stderr,
                "hd95_mean": float(np.mean(hds)) if hds else None,
            }
        )

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_prefix.with_suffix(".csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("pretrain_iterations,n_runs,dsc_mean,dsc_stderr,hd95_mean\n")
        for r in rows:
            f.write(
                f"{r['pretrain_iterations']},{r['n_runs']},{r['dsc_mean']},"
                f"{r['dsc_stderr']},{'' if r['hd95_mean'] is None else r['hd95_mean']}\n"
            )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [r["pretrain_iterations"] for r in rows]
    ys = [r["dsc_mean"] for r in rows]
    es = [r["dsc_stderr"] for r in rows]
    if len(rows) > 1:
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3)
        ax.set_xlabel("pretraining iterations")
    else:
        ax.bar([0], ys, yerr=es, capsize=3, color="#4878a8")
        ax.set_xticks([0])
        ax.set_xticklabels([str(xs[0])])
        ax.set_xlabel("run group")
    ax.set_ylabel("mean DSC")
    fig.tight_layout()
    png_path = out_prefix.with_suffix(".png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"rows": rows, "csv": str(csv_path), "plot": str(png_path)}
