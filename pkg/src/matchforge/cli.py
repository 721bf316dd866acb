"""Operator entry points.

Exit codes: 0 success, 1 usage or configuration error, 2 a run completed
with per-query failures. Deterministic subcommands (replay backend, hash
embedder) write byte-identical outputs for identical inputs.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click

from . import config as cfg
from .embedding_index import VectorIndex
from .eval_harness import (
    POLICY_ENTROPY,
    POLICY_RANDOM,
    ablation_report,
    deferral_curve,
    format_table,
    load_equivalence_map,
    metric_report,
    remedial_analysis,
)
from .match_pipeline import ABLATIONS, MatchRun
from .schema_model import load_ground_truth, load_schema
from .self_improve import bootstrap, build_eval_set, save_demo_sets


class PartialRunFailure(Exception):
    """A run finished, but some queries errored; maps to exit code 2."""


@click.group()
def cli() -> None:
    """Schema matching: indexing, matching, optimization, evaluation, review."""


def _common_settings(config_path: str | None, **flags) -> dict:
    file_values = cfg.load_config_file(config_path)
    return cfg.resolve(flags, file_values)


@cli.command("index")
@click.option("--target", "target_path", required=True, type=click.Path(exists=True), help="Target schema JSON.")
@click.option("--embedder", type=click.Choice(["hash", "remote"]), default=None, help="Embedder backend (default hash).")
@click.option("--embedder-url", default=None, help="Base URL for the remote embedder.")
@click.option("--dim", type=int, default=None, help="Hash embedder dimension (default 64).")
@click.option("--seed", type=int, default=None, help="Hash embedder seed (default 0).")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Index file to write.")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True), help="JSON config file.")
def cmd_index(target_path, embedder, embedder_url, dim, seed, out_path, config_path):
    """Build the multi-vector document index over a target schema."""
    settings = _common_settings(
        config_path, embedder=embedder, embedder_url=embedder_url, dim=dim, seed=seed
    )
    target = load_schema(target_path)
    emb = cfg.build_embedder(settings)
    index = VectorIndex.build(target, emb)
    index.save(out_path)
    click.echo(f"indexed {len(index)} documents at dimension {index.dim} -> {out_path}")


@cli.command("match")
@click.option("--source", "source_path", required=True, type=click.Path(exists=True), help="Source schema JSON.")
@click.option("--target", "target_path", required=True, type=click.Path(exists=True), help="Target schema JSON.")
@click.option("--index", "index_path", default=None, type=click.Path(exists=True), help="Persisted index (built fresh when omitted).")
@click.option("--backend", type=click.Choice(["replay", "live"]), default=None, help="LLM backend (default replay).")
@click.option("--cassette", default=None, type=click.Path(), help="Cassette journal for replay or recording.")
@click.option("--record", default=None, type=click.Path(), help="Record live exchanges to this cassette.")
@click.option("--demos", "demo_dir", default=None, type=click.Path(exists=True), help="Directory of stage demo files.")
@click.option("--ablation", type=click.Choice(list(ABLATIONS)), default=None, help="Candidate-generation ablation.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Run JSON to write.")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True), help="JSON config file.")
@click.option("--embedder", type=click.Choice(["hash", "remote"]), default=None)
@click.option("--embedder-url", default=None)
@click.option("--dim", type=int, default=None)
@click.option("--seed", type=int, default=None)
def cmd_match(source_path, target_path, index_path, backend, cassette, record,
              demo_dir, ablation, out_path, config_path, embedder, embedder_url, dim, seed):
    """Run the matching pipeline over every source attribute."""
    settings = _common_settings(
        config_path,
        backend=backend,
        cassette=cassette,
        record=record,
        demo_dir=demo_dir,
        ablation=ablation,
        index=index_path,
        embedder=embedder,
        embedder_url=embedder_url,
        dim=dim,
        seed=seed,
    )
    request = {"source": source_path, "target": target_path, "config": settings}
    pipeline, _ = cfg.build_pipeline_from_request(request)
    run = pipeline.run()
    run.save(out_path)
    failures = [o for o in run.outcomes if o.error is not None]
    click.echo(
        f"matched {len(run.outcomes)} queries "
        f"({sum(1 for o in run.outcomes if o.scored and o.scored.abstained)} abstained, "
        f"{len(failures)} failed) -> {out_path}"
    )
    if failures:
        for outcome in failures:
            click.echo(f"  failed {outcome.query.ref.dotted()}: {outcome.error}", err=True)
        raise PartialRunFailure(f"{len(failures)} queries failed")


@cli.command("optimize")
@click.option("--source", "source_path", required=True, type=click.Path(exists=True))
@click.option("--target", "target_path", required=True, type=click.Path(exists=True))
@click.option("--index", "index_path", default=None, type=click.Path(exists=True))
@click.option("--backend", type=click.Choice(["replay", "live"]), default=None)
@click.option("--cassette", default=None, type=click.Path())
@click.option("--record", default=None, type=click.Path())
@click.option("--n-easy", type=int, default=10, show_default=True, help="Easy eval queries to select.")
@click.option("--n-challenging", type=int, default=10, show_default=True, help="Challenging eval queries to select.")
@click.option("--n-demos", type=int, default=4, show_default=True, help="Max demonstrations to keep.")
@click.option("--min-rating", type=int, default=4, show_default=True, help="Minimum evaluator rating for a demo.")
@click.option("--out-demos", "out_dir", required=True, type=click.Path(), help="Directory for stage demo files.")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--embedder", type=click.Choice(["hash", "remote"]), default=None)
@click.option("--embedder-url", default=None)
@click.option("--dim", type=int, default=None)
@click.option("--seed", type=int, default=None)
def cmd_optimize(source_path, target_path, index_path, backend, cassette, record,
                 n_easy, n_challenging, n_demos, min_rating, out_dir, config_path,
                 embedder, embedder_url, dim, seed):
    """Bootstrap stage demonstrations from self-rated pipeline traces."""
    settings = _common_settings(
        config_path,
        backend=backend,
        cassette=cassette,
        record=record,
        index=index_path,
        embedder=embedder,
        embedder_url=embedder_url,
        dim=dim,
        seed=seed,
    )
    request = {"source": source_path, "target": target_path, "config": settings}
    pipeline, _ = cfg.build_pipeline_from_request(request)
    eval_set = build_eval_set(
        pipeline.source, pipeline.index, pipeline.embedder,
        n_easy=n_easy, n_challenging=n_challenging,
    )
    result = bootstrap(pipeline, eval_set, n_demos=n_demos, min_rating=min_rating)
    save_demo_sets(result.demo_sets, out_dir)
    click.echo(f"evaluated {len(result.scored_traces)} queries from a {len(eval_set)}-query eval set")
    for st in result.scored_traces:
        marker = "*" if st in result.selected else " "
        click.echo(f" {marker} {st.eval_query.ref.dotted()} [{st.eval_query.kind}] rating={st.rating}")
    click.echo(f"kept {len(result.selected)} traces -> {out_dir}")
    for warning in result.warnings:
        click.echo(f"warning: {warning}", err=True)


@cli.command("evaluate")
@click.option("--run", "run_path", required=True, type=click.Path(exists=True), help="Run JSON produced by `match`.")
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True), help="Ground-truth CSV.")
@click.option("--k", "ks", default="1,3,5", show_default=True, help="Comma-separated k values.")
@click.option("--deferral", "deferral_csv", default=None, type=click.Path(), help="Write the deferral curves to this CSV.")
@click.option("--deferral-seed", type=int, default=0, show_default=True)
@click.option("--remedial", "remedial_csv", default=None, type=click.Path(), help="Write the remedial curve to this CSV.")
@click.option("--remedial-thresholds", default="0.0,0.5,0.6,0.7,0.8,0.9,1.0", show_default=True)
@click.option("--target", "target_path", default=None, type=click.Path(exists=True), help="Target schema (required for --remedial).")
@click.option("--equivalence", "equivalence_path", default=None, type=click.Path(exists=True), help="CSV of interchangeable target pairs.")
@click.option("--report", "report_path", default=None, type=click.Path(), help="Write the metric report JSON here.")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--dim", type=int, default=None)
@click.option("--seed", type=int, default=None)
def cmd_evaluate(run_path, gold_path, ks, deferral_csv, deferral_seed, remedial_csv,
                 remedial_thresholds, target_path, equivalence_path, report_path,
                 config_path, dim, seed):
    """Score a persisted run: accuracy@k, deferral and remedial curves."""
    run = MatchRun.load(run_path)
    gold = load_ground_truth(gold_path)
    k_values = [int(k) for k in ks.split(",") if k.strip()]
    equivalence = load_equivalence_map(equivalence_path) if equivalence_path else None
    report = metric_report(run, gold, ks=k_values, equivalence=equivalence)
    for k in k_values:
        click.echo(f"accuracy@{k}: {report.accuracy_at[k]:.4f}")
    click.echo(f"queries: {report.n_queries}, abstained: {report.n_abstained}")

    if deferral_csv:
        curves = [
            deferral_curve(run, gold, policy=POLICY_ENTROPY),
            deferral_curve(run, gold, policy=POLICY_RANDOM, seed=deferral_seed),
        ]
        with open(deferral_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["policy", "seed", "p", "accuracy_at_1"])
            for curve in curves:
                for p, acc in curve.points:
                    writer.writerow([curve.policy, curve.seed if curve.seed is not None else "", p, f"{acc:.6f}"])
        click.echo(f"deferral curves -> {deferral_csv}")

    if remedial_csv:
        if not target_path:
            raise click.UsageError("--remedial requires --target to render attribute texts")
        settings = _common_settings(config_path, dim=dim, seed=seed)
        target = load_schema(target_path)
        embedder = cfg.build_embedder(settings)
        thresholds = [float(t) for t in remedial_thresholds.split(",") if t.strip()]
        points = remedial_analysis(run, gold, target, embedder, thresholds)
        with open(remedial_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "accuracy_at_1"])
            for t, acc in points:
                writer.writerow([t, f"{acc:.6f}"])
        click.echo(f"remedial curve -> {remedial_csv}")

    if report_path:
        Path(report_path).write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        click.echo(f"report -> {report_path}")


@cli.command("ablate")
@click.option("--source", "source_path", required=True, type=click.Path(exists=True))
@click.option("--target", "target_path", required=True, type=click.Path(exists=True))
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
@click.option("--cassette", required=True, type=click.Path(exists=True))
@click.option("--index", "index_path", default=None, type=click.Path(exists=True))
@click.option("--variants", default=",".join(ABLATIONS), show_default=True)
@click.option("--report", "report_path", default=None, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def cmd_ablate(source_path, target_path, gold_path, cassette, index_path, variants,
               report_path, config_path):
    """Compare candidate-generation variants on one replay cassette."""
    base = _common_settings(config_path, cassette=cassette, index=index_path)

    def run_variant(variant: str) -> MatchRun:
        settings = dict(base)
        settings["ablation"] = variant
        settings.setdefault("backend", "replay")
        request = {"source": source_path, "target": target_path, "config": settings}
        pipeline, _ = cfg.build_pipeline_from_request(request)
        return pipeline.run()

    source = load_schema(source_path)
    target = load_schema(target_path)
    gold = load_ground_truth(gold_path, source, target)
    rows = ablation_report(run_variant, [v.strip() for v in variants.split(",")], gold)
    click.echo(format_table(rows))
    if report_path:
        Path(report_path).write_text(
            json.dumps([r.to_dict() for r in rows], sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        click.echo(f"report -> {report_path}")


@cli.command("serve")
@click.option("--port", type=int, default=8400, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data-dir", "data_dir", required=True, type=click.Path(), help="Directory of persisted runs.")
@click.option("--ui-dir", "ui_dir", default=None, type=click.Path(), help="Static review UI build to host at /.")
def cmd_serve(port, host, data_dir, ui_dir):
    """Serve the run store API and the review UI."""
    import uvicorn

    from .service_store import create_app

    data_path = Path(data_dir)
    if data_path.exists() and not data_path.is_dir():
        raise click.UsageError(f"data dir {data_dir!r} is not a directory")
    if ui_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dir = str(bundled) if bundled.exists() else None
    app = create_app(data_dir, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port)


def main(argv: list[str] | None = None) -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except PartialRunFailure as exc:
        click.echo(f"partial failure: {exc}", err=True)
        return 2
    except cfg.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
