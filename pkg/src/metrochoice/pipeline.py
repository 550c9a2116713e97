"""File-artifact pipeline stages.

Each stage reads input artifacts, writes its outputs atomically
(temp-then-rename), and logs row counts. Stages are pure functions of
(inputs, config, seed), so re-running any stage is byte-idempotent and
running ``all`` equals running the stages one by one.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

from . import afc, choices, delays, evaluation, impact, llm, patterns, prompts, trees
from .config import PipelineConfig
from .network import load_network
from .synth import generate_world

log = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "mine", "delays", "affected", "label", "featurize", "predict", "eval")

# artifact filename -> stage that produces it (for missing-input messages)
PRODUCED_BY = {
    "network.json": "synth",
    "calendar.csv": "synth",
    "afc.csv": "synth",
    "delay_table.csv": "synth",
    "narratives.txt": "synth",
    "trips.csv": "ingest",
    "ingest_report.json": "ingest",
    "regulars.csv": "mine",
    "patterns.csv": "mine",
    "delay_events.jsonl": "delays",
    "log_extractions.jsonl": "delays",
    "affected.csv": "affected",
    "choices.csv": "label",
    "dataset.csv": "featurize",
    "split.json": "predict",
}


class StageInputMissing(Exception):
    def __init__(self, stage: str, path: Path):
        self.stage = stage
        self.path = path
        producer = PRODUCED_BY.get(path.name, "an earlier")
        super().__init__(
            f"{stage}: missing input {path} (produced by the {producer} stage)"
        )


def _require(stage: str, path: Path) -> Path:
    if not path.exists():
        raise StageInputMissing(stage, path)
    return path


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic(path: Path, write: Callable[[Path], None]) -> None:
    """Run a writer against a temp file, then rename over the target."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".{path.name}.tmp"
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if tmp.exists():
            tmp.unlink()
        raise


def stage_synth(cfg: PipelineConfig) -> None:
    world = cfg.synth
    if world is None:
        from .synth import WorldConfig

        world = WorldConfig(seed=cfg.seed)
    files, truth = generate_world(world, cfg.output_dir)
    log.info(
        "synth: %d regulars, %d affected instances, abandon rate %.3f",
        len(truth.regular_cards),
        len(truth.labels),
        truth.realized_abandon_rate,
    )


def stage_ingest(cfg: PipelineConfig) -> None:
    afc_path = _require("ingest", cfg.resolve("afc"))
    calendar = None
    if cfg.ingest.weekday_filter:
        calendar_path = _require("ingest", cfg.resolve("calendar"))
        calendar = afc.Calendar.load(calendar_path)
    records, report = afc.parse_afc_file(afc_path, calendar)
    trips, anomalies = afc.reconstruct_trips(records, cfg.ingest.max_trip_duration_minutes)
    report.anomalies = anomalies
    _atomic(cfg.artifact("trips.csv"), lambda p: afc.write_trips(trips, p))
    payload = {
        "accepted": report.accepted,
        "rejected": [
            {"row": r.row_number, "reason": r.reason, "raw": r.raw} for r in report.rejected
        ],
        "anomalies": [
            {"reason": a.reason, "card_id": a.card_id, "records": a.record_count, "detail": a.detail}
            for a in anomalies
        ],
        "trips": len(trips),
    }
    atomic_write_text(cfg.artifact("ingest_report.json"), json.dumps(payload, indent=2, sort_keys=True) + "\n")
    log.info(
        "ingest: %d rows in, %d accepted, %d rejected, %d trips, %d anomalies",
        report.input_rows, report.accepted, len(report.rejected), len(trips), len(anomalies),
    )


def stage_mine(cfg: PipelineConfig) -> None:
    trips_path = _require("mine", cfg.artifact("trips.csv"))
    trips = afc.read_trips(trips_path)
    regulars = patterns.extract_regulars(
        trips,
        day_threshold=cfg.mining.day_threshold,
        od_day_threshold=cfg.mining.od_day_threshold,
        eps_minutes=cfg.mining.eps_minutes,
        min_pts=cfg.mining.min_pts,
    )
    all_patterns = [p for r in regulars for p in r.patterns]
    _atomic(cfg.artifact("regulars.csv"), lambda p: patterns.write_regulars(regulars, p))
    _atomic(cfg.artifact("patterns.csv"), lambda p: patterns.write_patterns(all_patterns, p))
    log.info("mine: %d trips in, %d regulars, %d patterns", len(trips), len(regulars), len(all_patterns))


def stage_delays(cfg: PipelineConfig) -> None:
    table_path = _require("delays", cfg.resolve("delay_table"))
    network = load_network(_require("delays", cfg.resolve("network")))
    events, rejects = delays.parse_structured_delays_file(table_path, network)
    for r in rejects:
        log.warning("delays: rejected row %d (%s)", r.row_number, r.reason)
    results = delays.table_results(events)
    _atomic(cfg.artifact("delay_events.jsonl"), lambda p: delays.write_events_jsonl(results, p))

    narratives_path = cfg.resolve("narratives")
    if narratives_path.exists():
        extracted: list[delays.ExtractionResult] = []
        mismatches = 0
        by_key = {(e.date, e.line, e.start_minute): e for e in events}
        for chunk in delays.split_narratives(narratives_path.read_text(encoding="utf-8")):
            try:
                result = delays.extract_from_log(chunk, "rule", network=network)
            except delays.ExtractionError as exc:
                log.warning("delays: narrative skipped (%s)", exc)
                continue
            match = by_key.get((result.event.date, result.event.line, result.event.start_minute))
            if match is not None:
                result = delays.ExtractionResult(
                    event=delays.DelayEvent(
                        event_id=match.event_id,
                        line=result.event.line,
                        delay_type=result.event.delay_type,
                        date=result.event.date,
                        start_minute=result.event.start_minute,
                        end_minute=result.event.end_minute,
                        from_station=result.event.from_station,
                        to_station=result.event.to_station,
                        direction=result.event.direction,
                    ),
                    confidence=result.confidence,
                    provenance=result.provenance,
                    notes=result.notes,
                    train_delay_seconds=result.train_delay_seconds,
                )
                if result.event != match:
                    mismatches += 1
            extracted.append(result)
        _atomic(cfg.artifact("log_extractions.jsonl"), lambda p: delays.write_events_jsonl(extracted, p))
        log.info(
            "delays: %d table events, %d narratives extracted, %d disagree with the table",
            len(events), len(extracted), mismatches,
        )
    else:
        log.info("delays: %d table events, no narratives file", len(events))


def _load_events(cfg: PipelineConfig) -> list[delays.DelayEvent]:
    path = _require("affected", cfg.artifact("delay_events.jsonl"))
    return [r.event for r in delays.read_events_jsonl(path)]


def stage_affected(cfg: PipelineConfig) -> None:
    patterns_path = _require("affected", cfg.artifact("patterns.csv"))
    network = load_network(_require("affected", cfg.resolve("network")))
    events = _load_events(cfg)
    mined = patterns.read_patterns(patterns_path)
    instances = impact.find_affected(
        mined, events, network, window_pad_minutes=cfg.impact.window_pad_minutes
    )

    def write(p: Path) -> None:
        import csv

        with open(p, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                [
                    "card_id",
                    "pattern_id",
                    "event_id",
                    "origin",
                    "dest",
                    "overlap_stations",
                    "segment_entry_minute",
                    "window_start",
                    "window_end",
                ]
            )
            for inst in instances:
                writer.writerow(
                    [
                        inst.card_id,
                        inst.pattern.pattern_id,
                        inst.event_id,
                        inst.pattern.origin,
                        inst.pattern.dest,
                        "|".join(inst.overlap_stations),
                        f"{inst.segment_entry_minute:.3f}",
                        inst.window[0],
                        inst.window[1],
                    ]
                )

    _atomic(cfg.artifact("affected.csv"), write)
    log.info("affected: %d patterns x %d events -> %d instances", len(mined), len(events), len(instances))


def _read_affected_keys(path: Path) -> list[tuple[str, str, int]]:
    import csv

    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            out.append((row[0], row[1], int(row[2])))
    return out


def stage_label(cfg: PipelineConfig) -> None:
    affected_path = _require("label", cfg.artifact("affected.csv"))
    patterns_path = _require("label", cfg.artifact("patterns.csv"))
    afc_path = _require("label", cfg.resolve("afc"))
    calendar = None
    if cfg.ingest.weekday_filter:
        calendar = afc.Calendar.load(_require("label", cfg.resolve("calendar")))
    events = {e.event_id: e for e in _load_events(cfg)}
    pattern_by_id = {p.pattern_id: p for p in patterns.read_patterns(patterns_path)}
    keys = _read_affected_keys(affected_path)

    records, _ = afc.parse_afc_file(afc_path, calendar)
    event_dates = {e.date for e in events.values()}
    by_card_date: dict[tuple[str, object], list[afc.AfcRecord]] = {}
    for r in records:
        d = r.timestamp.date()
        if d in event_dates:
            by_card_date.setdefault((r.card_id, d), []).append(r)

    max_dur = cfg.ingest.max_trip_duration_minutes
    rows = []
    for card_id, pattern_id, event_id in keys:
        pattern = pattern_by_id[pattern_id]
        event = events[event_id]
        day_records = by_card_date.get((card_id, event.date), [])
        day_trips, _ = afc.reconstruct_trips(day_records, max_dur)
        bus_records = [r for r in day_records if not r.is_metro]
        decision = choices.label_choice(
            day_trips, bus_records, pattern, event, cfg.choice.slack_minutes
        )
        started = impact.started_before_delay(day_records, pattern, event)
        rows.append(
            [
                card_id,
                pattern_id,
                event_id,
                "true" if started else "false",
                decision.label.value,
                "true" if decision.bus_corroborated else "false",
                "true" if decision.mid_trip_exit else "false",
                "true" if decision.conflict else "false",
            ]
        )

    def write(p: Path) -> None:
        import csv

        with open(p, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["card_id", "pattern_id", "event_id", "started", "label", "bus_corroborated", "mid_trip_exit", "conflict"]
            )
            writer.writerows(rows)

    _atomic(cfg.artifact("choices.csv"), write)
    n_abandon = sum(1 for r in rows if r[4] == choices.ChoiceLabel.ABANDON.value)
    log.info("label: %d instances, %d abandon / %d wait", len(rows), n_abandon, len(rows) - n_abandon)


def stage_featurize(cfg: PipelineConfig) -> None:
    choices_path = _require("featurize", cfg.artifact("choices.csv"))
    patterns_path = _require("featurize", cfg.artifact("patterns.csv"))
    events = {e.event_id: e for e in _load_events(cfg)}
    pattern_by_id = {p.pattern_id: p for p in patterns.read_patterns(patterns_path)}

    import csv

    records: list[choices.ChoiceRecord] = []
    with open(choices_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            card_id, pattern_id, event_id, started, label = row[0], row[1], int(row[2]), row[3], row[4]
            pattern = pattern_by_id[pattern_id]
            event = events[event_id]
            records.append(
                choices.ChoiceRecord(
                    card_id=card_id,
                    event_id=event_id,
                    v1=event.delay_type,
                    v2=choices.bucket_delay_period(
                        event.start_minute, cfg.choice.morning_peak, cfg.choice.evening_peak
                    ),
                    p1=pattern.mean_duration,
                    p2=started == "true",
                    p3=choices.urgency(pattern),
                    label=choices.ChoiceLabel(label),
                )
            )
    _atomic(cfg.artifact("dataset.csv"), lambda p: choices.write_dataset(records, p))
    log.info("featurize: %d dataset rows", len(records))


def _split_dataset(cfg: PipelineConfig, records):
    if cfg.eval.split == "leave-one-event-out":
        if cfg.eval.holdout_event is None:
            raise ValueError("leave-one-event-out split needs eval.holdout_event")
        return evaluation.leave_one_event_out(records, cfg.eval.holdout_event)
    return evaluation.stratified_split(records, cfg.eval.test_fraction, cfg.seed)


def _predict_llm_like(cfg: PipelineConfig, backend, events, test) -> list[llm.Prediction]:
    """Group test records by event, batch, prompt, and parse; order preserved."""
    template = prompts.PromptTemplate(max_cases=cfg.predictor.batch_size)
    params = llm.DecodeParams(temperature=cfg.predictor.temperature)
    bundles = []
    for event_id in sorted({r.event_id for r in test}):
        event_records = [r for r in test if r.event_id == event_id]
        for i in range(0, len(event_records), cfg.predictor.batch_size):
            batch = event_records[i : i + cfg.predictor.batch_size]
            bundles.append(prompts.build_prompt(batch, events[event_id], template))

    def run(bundle):
        return llm.run_llm_predictor(
            backend, bundle, params=params, retry_budget=cfg.predictor.retry_budget
        )

    workers = max(1, min(cfg.predictor.max_in_flight, len(bundles) or 1))
    if workers == 1 or len(bundles) <= 1:
        results = [run(b) for b in bundles]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, bundles))
    return [p for chunk in results for p in chunk]


def _write_predictions(path: Path, preds: list[llm.Prediction]) -> None:
    import csv

    def write(p: Path) -> None:
        with open(p, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["card_id", "event_id", "label", "backend", "rationale", "retry_count"])
            for pred in preds:
                writer.writerow(
                    [
                        pred.card_id,
                        pred.event_id,
                        pred.label.value if pred.label else "Unresolved",
                        pred.backend_id,
                        pred.rationale,
                        pred.retry_count,
                    ]
                )

    _atomic(path, write)


def stage_predict(cfg: PipelineConfig) -> None:
    dataset_path = _require("predict", cfg.artifact("dataset.csv"))
    records = choices.read_dataset(dataset_path)
    events = {e.event_id: e for e in _load_events(cfg)}
    train, test = _split_dataset(cfg, records)
    split_payload = {
        "mode": cfg.eval.split,
        "seed": cfg.seed,
        "train": len(train),
        "test": len(test),
        "test_keys": [[r.card_id, r.event_id] for r in test],
    }
    atomic_write_text(cfg.artifact("split.json"), json.dumps(split_payload, indent=2, sort_keys=True) + "\n")

    hp = trees.Hyperparams(
        n_trees=cfg.predictor.n_trees,
        max_depth=cfg.predictor.max_depth,
        boost_depth=cfg.predictor.boost_depth,
        learning_rate=cfg.predictor.learning_rate,
    )
    for backend_name in cfg.predictor.backends:
        if backend_name == "mock":
            backend = llm.MockBackend(cfg.predictor.mock_rule)
            preds = _predict_llm_like(cfg, backend, events, test)
        elif backend_name == "llm":
            backend = llm.HttpBackend(
                cfg.predictor.endpoint,
                cfg.predictor.model,
                api_key_env=cfg.predictor.api_key_env,
                timeout_seconds=cfg.predictor.timeout_seconds,
                max_in_flight=cfg.predictor.max_in_flight,
            )
            preds = _predict_llm_like(cfg, backend, events, test)
        elif backend_name == "majority":
            preds = trees.MajorityBaseline.fit(train).predict(test)
        elif backend_name in ("rf", "gbt"):
            kind = "RandomForest" if backend_name == "rf" else "GradientBoosted"
            model = trees.fit_tree_ensemble(train, kind, hp, seed=cfg.seed)
            preds = trees.predict_with_model(model, test)
        else:
            raise ValueError(f"unknown predictor backend {backend_name!r}")
        _write_predictions(cfg.artifact(f"predictions_{backend_name}.csv"), preds)
        log.info("predict[%s]: %d predictions", backend_name, len(preds))


def _read_predictions(path: Path) -> list[llm.Prediction]:
    import csv

    preds = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            label = None if row[2] == "Unresolved" else choices.ChoiceLabel(row[2])
            preds.append(
                llm.Prediction(
                    card_id=row[0],
                    event_id=int(row[1]),
                    label=label,
                    rationale=row[4],
                    backend_id=row[3],
                    retry_count=int(row[5]),
                )
            )
    return preds


class StrictInconsistency(Exception):
    pass


def stage_eval(cfg: PipelineConfig) -> None:
    dataset_path = _require("eval", cfg.artifact("dataset.csv"))
    split_path = _require("eval", cfg.artifact("split.json"))
    records = {r.key: r for r in choices.read_dataset(dataset_path)}
    split = json.loads(split_path.read_text(encoding="utf-8"))
    test_keys = [(k[0], int(k[1])) for k in split["test_keys"]]
    truth = {key: records[key].label for key in test_keys}

    reports = []
    for backend_name in cfg.predictor.backends:
        path = cfg.artifact(f"predictions_{backend_name}.csv")
        if not path.exists():
            raise StageInputMissing("eval", path)
        preds = _read_predictions(path)
        reports.append(evaluation.compute_metrics(preds, truth, model_id=backend_name))
    table = evaluation.compare_models(reports)
    atomic_write_text(cfg.artifact("metrics.txt"), table.render_text())
    atomic_write_text(cfg.artifact("metrics.json"), table.to_json())
    log.info("eval: %d models scored on %d test records", len(reports), len(test_keys))
    if cfg.strict and table.has_inconsistency:
        raise StrictInconsistency("metric identity violated in strict mode")


STAGE_FUNCS: dict[str, Callable[[PipelineConfig], None]] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "mine": stage_mine,
    "delays": stage_delays,
    "affected": stage_affected,
    "label": stage_label,
    "featurize": stage_featurize,
    "predict": stage_predict,
    "eval": stage_eval,
}


def run_stage(name: str, cfg: PipelineConfig) -> None:
    if name == "all":
        chain = STAGES if cfg.synth is not None else STAGES[1:]
        for stage in chain:
            run_stage(stage, cfg)
        return
    STAGE_FUNCS[name](cfg)
