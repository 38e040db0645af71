"""Enhanced index assembly and filtered search.

enhance() runs the full build pipeline over an existing index: select leaves,
generate global/local training queries, collect targets in two passes, train
one filter per selected leaf, and fit the conformal auto-tuners. Every stage
persists its artifacts into the output directory; a marker file flags
partially built directories. Filtered search tunes per-filter offsets for the
request's recall target (memoized per target) and applies the cascade of
summarization and filter pruning.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conformal import (
    QualityOffsetCurve,
    build_skeleton,
    compute_alphas,
    fit_auto_tuners,
    tune,
)
from .mlp import TrainConfig, TrainReport, init_model, load_weights, save_weights, train
from .select import (
    RuntimeConstants,
    SelectionBudget,
    compute_threshold,
    measure_constants,
    select_greedy,
    selection_report,
)
from .series import Dataset, file_sha256, make_queries, save_dataset
from .traingen import (
    SplitPlan,
    assemble_filter_training,
    collect_local_targets,
    collect_targets,
    generate_global_queries,
    generate_local_queries,
    write_training_artifacts,
)
from .tree import Index, SearchOutcome, load_index, save_index, search_engine

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
INCOMPLETE_NAME = "incomplete.json"
ENHANCEMENT_FORMAT_VERSION = 1
DEFAULT_NOISE_RANGE = (0.1, 0.4)


class EnhanceError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"enhancement stage '{stage}' failed: {cause}")
        self.stage = stage


def derive_seed(master: int, tag: int) -> int:
    return (master * 1_000_003 + tag) % (2**31 - 1)


@dataclass(frozen=True)
class SearchRequest:
    query: object
    k: int = 1
    target: float | None = None
    exact: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.exact:
            if self.target is None:
                raise ValueError("request needs a recall target or the exact flag")
            if not 0.0 <= self.target <= 1.0:
                raise ValueError(f"target must be in [0, 1], got {self.target}")


class EnhancedIndex:
    """Base index plus per-leaf filters, curves, and enhancement metadata."""

    def __init__(
        self,
        base: Index,
        filters: dict,
        curves: dict,
        plan: SplitPlan,
        budget: SelectionBudget,
        constants: RuntimeConstants | None,
        selection: dict,
        train_reports: dict | None = None,
        dataset_path=None,
    ):
        leaf_ids = {leaf.node_id for leaf in base.leaves}
        selected_ids = {entry["leaf_id"] for entry in selection.get("selected", [])}
        for lid in filters:
            if lid not in leaf_ids:
                raise ValueError(f"filter leaf {lid} does not exist in the index")
            if lid not in selected_ids:
                raise ValueError(f"filter leaf {lid} is not in the selection report")
            if lid not in curves:
                raise ValueError(f"filter leaf {lid} has no fitted curve")
        self.base = base
        self.filters = dict(sorted(filters.items()))
        self.curves = curves
        self.plan = plan
        self.budget = budget
        self.constants = constants
        self.selection = selection
        self.train_reports = train_reports or {}
        self.dataset_path = dataset_path
        self._predictors = {lid: model.forward for lid, model in self.filters.items()}
        self._offset_cache = {}

    @property
    def filter_leaf_ids(self) -> list:
        return list(self.filters)

    def tuned_offsets(self, target: float) -> dict:
        """Per-filter offsets for a recall target, memoized on the exact value."""
        key = float(target)
        cached = self._offset_cache.get(key)
        if cached is None:
            cached = tune(self.curves, key)
            self._offset_cache[key] = cached
        return cached


def search(eidx: EnhancedIndex, req: SearchRequest) -> SearchOutcome:
    """Filtered search at the request's recall target; exact mode bypasses filters."""
    if req.exact:
        return search_engine(eidx.base, req.query, req.k)
    offsets = eidx.tuned_offsets(req.target)
    return search_engine(
        eidx.base, req.query, req.k, predictors=eidx._predictors, offsets=offsets
    )


def _train_task(args):
    leaf_id, train_x, train_y, val_x, val_y, init_seed, cfg = args
    model = init_model(train_x.shape[1], init_seed)
    trained, report = train(model, train_x, train_y, val_x, val_y, cfg)
    return leaf_id, trained, report


def _train_filters(tasks, workers: int):
    """Run training tasks, in-process or across worker processes.

    Results are keyed by leaf id and each task carries its own seeds, so the
    outcome is identical regardless of scheduling.
    """
    results = {}
    if workers <= 1:
        for args in tasks:
            lid, model, report = _train_task(args)
            results[lid] = (model, report)
            logger.info("trained filter %d: %d epochs, val MSE %.4f", lid, report.epochs_run, report.final_val_loss)
        return results
    task_iter = iter(tasks)
    with ProcessPoolExecutor(max_workers=workers) as ex:
        pending = set()
        def submit_next():
            args = next(task_iter, None)
            if args is None:
                return False
            pending.add(ex.submit(_train_task, args))
            return True
        for _ in range(workers * 2):
            if not submit_next():
                break
        while pending:
            done, pending = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                lid, model, report = fut.result()
                results[lid] = (model, report)
                logger.info("trained filter %d: %d epochs, val MSE %.4f", lid, report.epochs_run, report.final_val_loss)
                submit_next()
    return results


def enhance(
    index: Index,
    plan: SplitPlan,
    budget: SelectionBudget,
    seed: int,
    out_dir,
    *,
    dataset_path=None,
    constants: RuntimeConstants | None = None,
    train_cfg: TrainConfig | None = None,
    noise_range=DEFAULT_NOISE_RANGE,
    workers: int = 1,
) -> EnhancedIndex:
    """Build filters and auto-tuners over an existing index, persisting all artifacts.

    Deterministic for fixed seeds (and fixed injected constants); measured
    constants only influence the selection threshold. Raises EnhanceError
    naming the failing stage; a partially written directory keeps an
    incomplete marker.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = train_cfg or TrainConfig()
    stage = "init"

    def begin(name):
        nonlocal stage
        stage = name
        with open(out_dir / INCOMPLETE_NAME, "w") as fh:
            json.dump({"stage": name}, fh)
        logger.info("enhancement stage: %s", name)

    try:
        begin("dataset")
        if dataset_path is None:
            dataset_path = out_dir / "dataset.bin"
            if not dataset_path.exists():
                save_dataset(index.dataset, dataset_path)

        begin("measure")
        if constants is None:
            sample = make_queries(index.dataset, 128, 0.2, derive_seed(seed, 1))
            constants = measure_constants(index, sample.values, init_model(index.dataset.m, 0))

        begin("select")
        threshold = compute_threshold(constants, budget.a)
        selected = select_greedy(index.leaf_sizes(), threshold, budget, constants.filter_bytes)
        selected = sorted(selected)
        sizes = dict(index.leaf_sizes())
        report = selection_report(constants, budget, threshold, selected, sizes)
        with open(out_dir / "selection.json", "w") as fh:
            json.dump(report, fh, indent=1)
        if not selected:
            logger.warning("selection is empty (budget %d bytes, th %d): search will behave exactly",
                           budget.capacity_bytes, threshold)

        filters, curves, reports = {}, {}, {}
        global_set = None
        locals_map = {}
        if selected:
            begin("global-queries")
            gqueries, glevels = generate_global_queries(
                index.dataset, plan.n_global, noise_range, derive_seed(seed, 2)
            )

            begin("collect-targets")
            global_set = collect_targets(index, selected, gqueries, plan.calibration)

            begin("local-queries")
            for lid in selected:
                local = generate_local_queries(
                    index, lid, plan.n_local, noise_range, derive_seed(seed, 10_000 + lid)
                )
                locals_map[lid] = collect_local_targets(index, local)
            write_training_artifacts(out_dir / "trainset", global_set, locals_map)

            begin("train-filters")
            tasks = []
            for lid in selected:
                fd = assemble_filter_training(
                    lid, global_set, locals_map[lid], plan, derive_seed(seed, 30_000 + lid)
                )
                tasks.append(
                    (lid, fd.train_x, fd.train_y, fd.val_x, fd.val_y,
                     derive_seed(seed, 40_000 + lid),
                     TrainConfig(**{**train_cfg.__dict__, "seed": derive_seed(seed, 20_000 + lid)}))
                )
            trained = _train_filters(tasks, workers)
            filters = {lid: model for lid, (model, _) in trained.items()}
            reports = {lid: rep for lid, (_, rep) in trained.items()}

            begin("fit-tuners")
            calib_x = global_set.queries[global_set.train_pool_size :]
            tail = slice(global_set.train_pool_size, None)
            # per-query forward (not the batched path): calibration errors must
            # be measured on bit-identical predictions to the ones search makes
            predictions = {
                lid: np.array([filters[lid].forward(q) for q in calib_x]) for lid in selected
            }
            alphas = {
                lid: compute_alphas(predictions[lid], global_set.dl_selected[tail, col])
                for col, lid in enumerate(global_set.selected_leaves)
            }
            skeleton = build_skeleton(
                global_set.lb_matrix[tail],
                global_set.dl_calib_full,
                global_set.visit_order[tail],
                global_set.nn_distance[tail],
                global_set.leaf_ids,
                selected,
                predictions,
            )
            curves = fit_auto_tuners(skeleton, alphas)

        begin("persist")
        eidx = EnhancedIndex(
            index, filters, curves, plan, budget, constants, report, reports, dataset_path
        )
        save_enhanced(eidx, out_dir, seed=seed)
        (out_dir / INCOMPLETE_NAME).unlink()
        return eidx
    except EnhanceError:
        raise
    except BaseException as exc:
        raise EnhanceError(stage, exc) from exc


def _curves_doc(curves: dict) -> list:
    out = []
    for lid, curve in sorted(curves.items()):
        out.append(
            {
                "leaf_id": lid,
                "alphas_desc": [float(a) for a in curve.alphas_desc],
                "knots": [
                    {"quality": float(q), "offset": float(o)}
                    for q, o in zip(curve.knot_quality, curve.knot_offset)
                ],
                "degenerate": bool(curve.degenerate),
            }
        )
    return out


def _curves_from_doc(doc: list) -> dict:
    curves = {}
    for entry in doc:
        curves[int(entry["leaf_id"])] = QualityOffsetCurve(
            leaf_id=int(entry["leaf_id"]),
            alphas_desc=np.asarray(entry["alphas_desc"], dtype=np.float64),
            knot_quality=np.asarray([k["quality"] for k in entry["knots"]], dtype=np.float64),
            knot_offset=np.asarray([k["offset"] for k in entry["knots"]], dtype=np.float64),
            degenerate=bool(entry.get("degenerate", False)),
        )
    return curves


def save_enhanced(eidx: EnhancedIndex, path, seed: int | None = None) -> None:
    """Write the enhancement directory; the manifest (with hashes) goes last."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if eidx.dataset_path is None:
        eidx.dataset_path = path / "dataset.bin"
        save_dataset(eidx.base.dataset, eidx.dataset_path)
    ds_path = Path(eidx.dataset_path)
    recorded = ds_path.name if ds_path.parent == path else str(ds_path)
    save_index(eidx.base, path / "index.json", ds_path)
    # store the dataset path relative to the directory when it lives inside
    if recorded != str(ds_path):
        with open(path / "index.json") as fh:
            doc = json.load(fh)
        doc["dataset_path"] = recorded
        with open(path / "index.json", "w") as fh:
            json.dump(doc, fh)
    with open(path / "selection.json", "w") as fh:
        json.dump(eidx.selection, fh, indent=1)
    with open(path / "curves.json", "w") as fh:
        json.dump(_curves_doc(eidx.curves), fh)
    filters_dir = path / "filters"
    filters_dir.mkdir(exist_ok=True)
    for lid, model in eidx.filters.items():
        save_weights(model, filters_dir / f"{lid}.bin")
    with open(path / "training_reports.json", "w") as fh:
        json.dump(
            {
                str(lid): {
                    "epochs_run": rep.epochs_run,
                    "final_train_loss": rep.final_train_loss,
                    "final_val_loss": rep.final_val_loss,
                    "lr_trajectory": rep.lr_trajectory,
                }
                for lid, rep in eidx.train_reports.items()
            },
            fh,
        )

    artifacts = {}
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name not in (MANIFEST_NAME, INCOMPLETE_NAME):
            artifacts[str(p.relative_to(path))] = file_sha256(p)
    manifest = {
        "version": ENHANCEMENT_FORMAT_VERSION,
        "dataset_path": recorded,
        "dataset_sha256": file_sha256(ds_path),
        "config": {
            "seed": seed,
            "plan": {
                "n_global": eidx.plan.n_global,
                "n_local": eidx.plan.n_local,
                "calibration": eidx.plan.calibration,
            },
            "budget": {"capacity_bytes": eidx.budget.capacity_bytes, "a": eidx.budget.a},
        },
        "artifacts": artifacts,
    }
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_enhanced(path, dataset: Dataset | None = None) -> EnhancedIndex:
    """Load and verify an enhancement directory.

    Refuses incomplete directories, checksum mismatches, a dataset hash that
    differs from the manifest, and filters without fitted curves.
    """
    path = Path(path)
    if (path / INCOMPLETE_NAME).exists():
        with open(path / INCOMPLETE_NAME) as fh:
            stage = json.load(fh).get("stage")
        raise ValueError(f"enhancement at {path} is incomplete (failed stage: {stage})")
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise ValueError(f"no manifest at {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != ENHANCEMENT_FORMAT_VERSION:
        raise ValueError(f"unsupported enhancement version {manifest.get('version')}")
    for rel, sha in manifest["artifacts"].items():
        p = path / rel
        if not p.exists():
            raise ValueError(f"missing artifact {rel}")
        if file_sha256(p) != sha:
            raise ValueError(f"checksum mismatch for artifact {rel}")

    ds_path = Path(manifest["dataset_path"])
    if not ds_path.is_absolute() and not ds_path.exists():
        ds_path = path / ds_path
    if file_sha256(ds_path) != manifest["dataset_sha256"]:
        raise ValueError(f"dataset hash mismatch for {ds_path}")

    index = load_index(path / "index.json", dataset=dataset, dataset_path=ds_path)
    with open(path / "selection.json") as fh:
        selection = json.load(fh)
    with open(path / "curves.json") as fh:
        curves = _curves_from_doc(json.load(fh))

    filters = {}
    for entry in selection.get("selected", []):
        lid = int(entry["leaf_id"])
        weights_path = path / "filters" / f"{lid}.bin"
        if not weights_path.exists():
            raise ValueError(f"missing filter weights for leaf {lid}")
        if lid not in curves:
            raise ValueError(f"missing fitted curve for leaf {lid}")
        filters[lid] = load_weights(weights_path)

    reports = {}
    reports_path = path / "training_reports.json"
    if reports_path.exists():
        with open(reports_path) as fh:
            for lid, rep in json.load(fh).items():
                reports[int(lid)] = TrainReport(
                    epochs_run=rep["epochs_run"],
                    final_train_loss=rep["final_train_loss"],
                    final_val_loss=rep["final_val_loss"],
                    lr_trajectory=rep["lr_trajectory"],
                )

    cfg = manifest.get("config", {})
    plan_doc = cfg.get("plan", {})
    plan = SplitPlan(
        n_global=plan_doc.get("n_global", 1500),
        n_local=plan_doc.get("n_local", 500),
        calibration=plan_doc.get("calibration", 300),
    )
    budget_doc = cfg.get("budget", {})
    budget = SelectionBudget(
        capacity_bytes=budget_doc.get("capacity_bytes", 0), a=budget_doc.get("a", 2.0)
    )
    constants = RuntimeConstants(selection["t_S"], selection["t_F"], selection["w"])
    return EnhancedIndex(
        index, filters, curves, plan, budget, constants, selection, reports, ds_path
    )
