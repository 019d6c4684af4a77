"""Experiment stages and their on-disk artifacts.

Every stage reads its inputs from the output directory, writes its artifacts
there, and records a provenance file under ``provenance/<stage>.json`` with
the full configuration, seed, input and output hashes, and timing.  One stage
runs at a time per output directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from semapop import __version__, calibration, counterfactual, gan, persona, vae
from semapop.checkpoint import load_checkpoint
from semapop.config import ExperimentConfig
from semapop.embeddings import EmbeddingCache, EmbeddingMatrix, TransformersEmbedder, embed_texts, mock_embed, zero_embeddings
from semapop.marginal import MarginalSpec, build_marginal_spec
from semapop.metrics import evaluate
from semapop.population import Population, load_population, split, stratified_sample, write_population
from semapop.schema import AttributeSchema, default_schema, fit_schema_stats, load_schema
from semapop.toy import default_toy_spec, make_toy_population

logger = logging.getLogger(__name__)

STAGES = ("prepare", "personas", "embed", "train", "generate", "evaluate", "calibrate", "intervene", "report")
SPLITS = ("train", "val", "test")


class StageError(RuntimeError):
    pass


class Workspace:
    """Paths of every artifact under one output directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    data = property(lambda self: self.root / "data")
    schema = property(lambda self: self.root / "data" / "schema.json")
    marginal_spec = property(lambda self: self.root / "data" / "marginal_spec.json")
    personas = property(lambda self: self.root / "personas")
    embeddings = property(lambda self: self.root / "embeddings")
    cache = property(lambda self: self.root / "cache")
    model = property(lambda self: self.root / "model")
    generated = property(lambda self: self.root / "generated" / "population.csv")
    evaluation = property(lambda self: self.root / "evaluation")
    calibration = property(lambda self: self.root / "calibration")
    intervention = property(lambda self: self.root / "intervention")
    report = property(lambda self: self.root / "report.csv")
    provenance = property(lambda self: self.root / "provenance")

    def split_csv(self, name: str) -> Path:
        return self.data / f"{name}.csv"

    def persona_file(self, name: str) -> Path:
        return self.personas / f"{name}.jsonl"

    def embedding_index(self) -> Path:
        return self.embeddings / "index.json"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(root: Path, paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            if q.exists():
                out[str(q.relative_to(root))] = sha256_file(q)
    return out


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {what}: run `semapop {stage}` first")
    return path


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


def _write_rows(path: Path, rows: list[dict]) -> Path:
    """CSV with a header row plus a JSON mirror next to it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    _write_json(path.with_suffix(".json"), rows)
    return path


# ---------------------------------------------------------------- loaders


def _load_schema(ws: Workspace) -> AttributeSchema:
    return load_schema(_require(ws.schema, "prepared data", "prepare"))


def _load_split(ws: Workspace, name: str, schema: AttributeSchema) -> Population:
    return load_population(_require(ws.split_csv(name), "prepared data", "prepare"), schema)


def _load_spec(ws: Workspace) -> MarginalSpec:
    return MarginalSpec.from_dict(json.loads(_require(ws.marginal_spec, "prepared data", "prepare").read_text()))


def _load_embeddings(ws: Workspace, name: str) -> EmbeddingMatrix:
    index = json.loads(_require(ws.embedding_index(), "persona embeddings", "embed").read_text())
    return EmbeddingCache(ws.cache / "embeddings").load(index[name])


def _load_model(ws: Workspace):
    _require(ws.model / "manifest.json", "trained model", "train")
    ckpt = load_checkpoint(ws.model)
    return vae.vae_from_checkpoint(ckpt) if ckpt.backbone == "vae" else gan.model_from_checkpoint(ckpt)


def _load_generated(ws: Workspace, schema: AttributeSchema) -> Population:
    return load_population(_require(ws.generated, "generated population", "generate"), schema)


# ---------------------------------------------------------------- stages


def stage_prepare(cfg: ExperimentConfig, ws: Workspace):
    d = cfg.data
    if d.population is None:
        toy = default_toy_spec()
        schema = toy.schema() if d.schema is None else load_schema(d.schema)
        pop = make_toy_population(toy, d.toy_n, cfg.seed)
        inputs = []
    else:
        schema = default_schema() if d.schema is None else load_schema(d.schema)
        pop = load_population(d.population, schema)
        inputs = [Path(d.population)] + ([Path(d.schema)] if d.schema else [])
    if d.stratum is not None:
        pop = stratified_sample(pop, d.stratum, d.sample_fraction, cfg.seed)
    parts = split(pop, d.split, cfg.seed)
    schema = fit_schema_stats(schema, parts[0])
    parts = [Population(p.frame, schema) for p in parts]
    ws.data.mkdir(parents=True, exist_ok=True)
    schema.save(ws.schema)
    for name, part in zip(SPLITS, parts):
        write_population(part, ws.split_csv(name))
    spec = build_marginal_spec(parts[0], schema)
    _write_json(ws.marginal_spec, spec.to_dict())
    return inputs, [ws.data]


def _persona_texts(cfg: ExperimentConfig, pop: Population, ws: Workspace) -> list[str]:
    mode = cfg.persona.mode
    if mode == "none":
        return [""] * pop.n
    rows = pop.frame.to_dict("records")
    if not cfg.persona.endpoint:
        return [persona.mock_persona(r, pop.schema, mode) for r in rows]
    client = persona.LLMClientConfig.from_env(
        endpoint=cfg.persona.endpoint,
        model_name=cfg.persona.model_name,
        temperature=cfg.persona.temperature,
        top_p=cfg.persona.top_p,
        max_new_tokens=cfg.persona.max_new_tokens,
        max_parallel=cfg.persona.max_parallel,
    )
    prompts = [persona.render_prompt(r, pop.schema, mode) for r in rows]
    result = persona.generate_personas(prompts, client, persona.PersonaCache(ws.cache / "personas"))
    if result.failed:
        raise StageError(f"persona generation failed for {len(result.failed)} agents (first: {result.failed[:5]}); re-run to resume")
    return result.texts


def stage_personas(cfg: ExperimentConfig, ws: Workspace):
    schema = _load_schema(ws)
    ws.personas.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        pop = _load_split(ws, name, schema)
        texts = _persona_texts(cfg, pop, ws)
        with ws.persona_file(name).open("w", encoding="utf-8") as fh:
            for i, text in enumerate(texts):
                fh.write(json.dumps({"agent_index": i, "mode": cfg.persona.mode, "persona_text": text}) + "\n")
    return [ws.data], [ws.personas]


def _read_personas(ws: Workspace, name: str) -> list[str]:
    with ws.persona_file(name).open(encoding="utf-8") as fh:
        return [json.loads(line)["persona_text"] for line in fh]


def stage_embed(cfg: ExperimentConfig, ws: Workspace):
    schema = _load_schema(ws)
    cache = EmbeddingCache(ws.cache / "embeddings")
    e = cfg.embedder
    index, inputs = {}, [ws.data]
    for name in SPLITS:
        if ws.persona_file(name).exists():
            texts = _read_personas(ws, name)
            inputs.append(ws.persona_file(name))
        elif cfg.persona.mode == "none" or not cfg.persona.endpoint:
            # offline personas are a pure function of the agent rows
            texts = _persona_texts(cfg, _load_split(ws, name, schema), ws)
        else:
            raise StageError("missing personas: run `semapop personas` first")
        kind = "zero" if cfg.persona.mode == "none" else e.kind
        key = EmbeddingCache.key(texts, cfg.persona.mode, e.model_name or kind, kind=kind, dim=e.dim, seed=e.seed, last_layers=e.last_layers)
        if key not in cache:
            if kind == "zero":
                emb = zero_embeddings(len(texts), e.dim)
            elif kind == "mock":
                emb = mock_embed(texts, e.dim, e.seed)
            else:
                emb = embed_texts(texts, TransformersEmbedder(e.model_name), e.last_layers)
            cache.save(key, emb)
        index[name] = key
    _write_json(ws.embedding_index(), index)
    return inputs, [ws.embeddings]


def stage_train(cfg: ExperimentConfig, ws: Workspace):
    schema = _load_schema(ws)
    train_pop = _load_split(ws, "train", schema)
    emb = _load_embeddings(ws, "train")
    spec = _load_spec(ws)
    if cfg.backbone == "gan":
        gan.train(train_pop, emb, schema, cfg.gan_config(), spec, out_dir=ws.model)
    else:
        vae.train_vae(train_pop, emb, schema, cfg.vae_config(), spec, out_dir=ws.model)
    return [ws.data, ws.embeddings], [ws.model]


def _conditioning_rows(cfg: ExperimentConfig, emb: EmbeddingMatrix) -> np.ndarray:
    n = cfg.generate_n or emb.n
    return np.resize(emb.matrix, (n, emb.dim))


def stage_generate(cfg: ExperimentConfig, ws: Workspace):
    model = _load_model(ws)
    E = _conditioning_rows(cfg, _load_embeddings(ws, "test"))
    if isinstance(model, vae.VaeModel):
        pop = vae.sample_vae(model, E, cfg.seed)
    else:
        pop = gan.sample_population(model, E, cfg.seed)
    ws.generated.parent.mkdir(parents=True, exist_ok=True)
    write_population(pop, ws.generated)
    return [ws.model, ws.embeddings], [ws.generated]


def stage_evaluate(cfg: ExperimentConfig, ws: Workspace):
    schema = _load_schema(ws)
    gen = _load_generated(ws, schema)
    ref = _load_split(ws, "test", schema)
    report = evaluate(gen, ref, _load_spec(ws))
    ws.evaluation.mkdir(parents=True, exist_ok=True)
    report.to_json(ws.evaluation / "metrics.json")
    report.to_csv_row(ws.evaluation / "metrics.csv")
    return [ws.generated, ws.data], [ws.evaluation]


def _calibration_attributes(cfg: ExperimentConfig, schema: AttributeSchema) -> list[str]:
    if cfg.calibration.attributes:
        return list(cfg.calibration.attributes)
    chosen = [a for a in calibration.DEFAULT_CONSTRAINED if a in schema.names]
    return chosen or schema.names


def stage_calibrate(cfg: ExperimentConfig, ws: Workspace):
    schema = _load_schema(ws)
    gen = _load_generated(ws, schema)
    ref = _load_split(ws, "test", schema)
    spec = _load_spec(ws)
    inputs = [ws.generated, ws.data]
    if cfg.calibration.targets:
        targets = calibration.CalibrationTargets.load(cfg.calibration.targets)
        inputs.append(Path(cfg.calibration.targets))
    else:
        targets = calibration.CalibrationTargets.from_reference(ref, spec, _calibration_attributes(cfg, schema))
    ws.calibration.mkdir(parents=True, exist_ok=True)
    targets.save(ws.calibration / "targets.json")
    rows = calibration.calibration_sweep(gen, targets, cfg.calibration.levels, spec, ref, cfg.calibration.damping)
    calibration.write_sweep(rows, ws.calibration / "sweep.csv", targets.order)
    return inputs, [ws.calibration]


def _target_attr(cfg: ExperimentConfig, schema: AttributeSchema) -> str:
    target = cfg.intervention.target
    if target is None:
        target = "Trips_of_PublicTransport" if "Trips_of_PublicTransport" in schema.names else None
    if target is None or target not in schema.names or schema[target].is_categorical:
        raise StageError("intervention.target must name a numerical attribute")
    return target


def stage_intervene(cfg: ExperimentConfig, ws: Workspace):
    schema = _load_schema(ws)
    model = _load_model(ws)
    target = _target_attr(cfg, schema)
    train_pop, test_pop = _load_split(ws, "train", schema), _load_split(ws, "test", schema)
    E_train, E_test = _load_embeddings(ws, "train"), _load_embeddings(ws, "test")
    ic = cfg.intervention
    out = ws.intervention
    out.mkdir(parents=True, exist_ok=True)

    labels = (train_pop.frame[target].to_numpy(dtype=np.float64) > 0).astype(int)
    standardizer, E_std = counterfactual.standardize_embeddings(E_train)
    direction = counterfactual.fit_direction(E_std, labels, ic.probe_lambda, f"{target} > 0")
    _write_json(out / "direction.json", {"d": direction.d.tolist(), "lambda": direction.probe_lambda, "label": direction.target_label_def})

    high, low = counterfactual.build_subgroups(test_pop, target, cfg.seed)
    _write_json(out / "subgroups.json", {"high": high.tolist(), "low": low.tolist()})
    semantic = []
    # the high group is pushed down, so its effective direction is reversed
    for group, rows, sign in (("all", None, 1.0), ("low", low, 1.0), ("high", high, -1.0)):
        E = E_test.matrix if rows is None else E_test.matrix[rows]
        if len(E) == 0:
            continue
        rep = counterfactual.semantic_sweep(model, E, direction, [sign * a for a in ic.alphas], target, cfg.seed, standardizer)
        for row in rep.semantic:
            semantic.append({"group": group, **row, "alpha": sign * row["alpha"]})
    semantic.sort(key=lambda r: (r["group"], r["alpha"]))
    _write_rows(out / "semantic.csv", semantic)

    text_rows = _text_interventions(cfg, ws, model, target, test_pop, high, low)
    if text_rows:
        _write_rows(out / "text.csv", text_rows)
    return [ws.model, ws.data, ws.embeddings], [out]


def _text_interventions(cfg, ws, model, target, test_pop, high, low) -> list[dict]:
    """Edit personas of the subgroups (insertion for low, removal/suppression for high) and re-embed."""
    e = cfg.embedder
    if cfg.persona.mode in ("none", "randomized") or not cfg.intervention.text_variants:
        return []
    if cfg.persona.endpoint:
        if not ws.persona_file("test").exists():
            raise StageError("missing personas: run `semapop personas` first")
        texts = _read_personas(ws, "test")
        editor = persona.LLMClientConfig.from_env(endpoint=cfg.persona.endpoint, model_name=cfg.persona.model_name)
        cue = cfg.intervention.cue or persona.DEFAULT_CUE
    else:
        texts = _read_personas(ws, "test") if ws.persona_file("test").exists() else _persona_texts(cfg, test_pop, ws)
        editor = persona.mock_editor(target)
        cue = cfg.intervention.cue or target

    def embed_fn(batch):
        if e.kind == "mock":
            return mock_embed(batch, e.dim, e.seed)
        return embed_texts(batch, TransformersEmbedder(e.model_name), e.last_layers)

    cache = persona.PersonaCache(ws.cache / "edits")
    rows = []
    for group, idx, variants in (("low", low, ("insertion",)), ("high", high, ("removal", "suppression"))):
        variants = [v for v in variants if v in cfg.intervention.text_variants]
        if len(idx) == 0 or not variants:
            continue
        base = [texts[i] for i in idx]
        edited = {}
        for v in variants:
            result = persona.text_edit(base, v, editor, cache, cue)
            if result.failed:
                raise StageError(f"text edit {v!r} failed for {len(result.failed)} personas; re-run to resume")
            edited[v] = result.texts
        rep = counterfactual.text_sweep(model, base, edited, embed_fn, cfg.seed, target)
        rows.extend({"group": group, **r} for r in rep.text)
    return rows


def stage_report(cfg: ExperimentConfig, ws: Workspace):
    rows, inputs = [], []
    metrics_path = ws.evaluation / "metrics.json"
    if metrics_path.exists():
        inputs.append(metrics_path)
        doc = json.loads(metrics_path.read_text())
        for k in ("srmse_m", "srmse_b", "precision", "recall", "f1"):
            rows.append({"table": "evaluation", "key": "generated", "metric": k, "value": doc[k]})
    sweep_path = ws.calibration / "sweep.json"
    if sweep_path.exists():
        inputs.append(sweep_path)
        for r in json.loads(sweep_path.read_text())["rows"]:
            for k in ("srmse_m_weighted", "srmse_b_weighted", "ess"):
                rows.append({"table": "calibration", "key": r["level"], "metric": k, "value": r[k]})
    for name in ("semantic", "text"):
        path = ws.intervention / f"{name}.json"
        if path.exists():
            inputs.append(path)
            for r in json.loads(path.read_text()):
                key = f"{r['group']}:alpha={r['alpha']!r}" if name == "semantic" else f"{r['group']}:{r['variant']}"
                for k, v in r.items():
                    if k not in ("group", "alpha", "variant"):
                        rows.append({"table": f"intervention_{name}", "key": key, "metric": k, "value": v})
    if not rows:
        raise StageError("nothing to report: run `semapop evaluate`, `calibrate` or `intervene` first")
    _write_rows(ws.report, rows)
    return inputs, [ws.report, ws.report.with_suffix(".json")]


_RUNNERS = {
    "prepare": stage_prepare,
    "personas": stage_personas,
    "embed": stage_embed,
    "train": stage_train,
    "generate": stage_generate,
    "evaluate": stage_evaluate,
    "calibrate": stage_calibrate,
    "intervene": stage_intervene,
    "report": stage_report,
}


def run(command: str, cfg: ExperimentConfig) -> Path:
    """Execute one stage under the output directory's advisory lock; returns its provenance path."""
    if command not in _RUNNERS:
        raise StageError(f"unknown stage {command!r}; expected one of {', '.join(STAGES)}")
    ws = Workspace(cfg.out)
    ws.root.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(ws.root / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise StageError(f"another stage is running in {ws.root}") from exc
    try:
        started = time.time()
        t0 = time.perf_counter()
        inputs, outputs = _RUNNERS[command](cfg, ws)
        root = ws.root.resolve()
        inside = [p for p in inputs if root == Path(p).resolve() or root in Path(p).resolve().parents]
        outside = [Path(p) for p in inputs if p not in inside]
        prov = {
            "stage": command,
            "version": __version__,
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "inputs": _hashes(ws.root, inside),
            "external_inputs": {str(p): sha256_file(p) for p in outside if p.is_file()},
            "outputs": _hashes(ws.root, outputs),
            "started_unix": started,
            "elapsed_s": time.perf_counter() - t0,
        }
        path = _write_json(ws.provenance / f"{command}.json", prov)
        logger.info("%s finished in %.1fs", command, prov["elapsed_s"])
        return path
    finally:
        lock.release()


def replay(provenance_path: str | Path) -> Path:
    """Re-run a stage from its provenance record alone."""
    prov = json.loads(Path(provenance_path).read_text())
    return run(prov["stage"], ExperimentConfig.from_dict(prov["config"]))
