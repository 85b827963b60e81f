"""Batch entry points: task generation, condition sweeps, IRL training, API.

Every command funnels its randomness through one ``--seed`` flag;
multi-run commands derive per-run sub-seeds from it, so identical flags
reproduce identical outputs byte for byte. Flags are echoed into a
metadata file next to each command's outputs.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import __version__, seeding
from .envsim import generate_synthetic_task, load_task, save_task
from .domain import EpisodeConfig
from .episode import (
    compare_strategies,
    read_trajectory,
    run_condition,
    save_curve_plot,
    write_curves_csv,
    write_trajectory,
)
from .errors import EngineError, InsufficientData
from .irl import (
    DemonstrationSet,
    ExpertSpec,
    IrlConfig,
    load_weights,
    save_weights,
    synthetic_expert,
    train_weights,
)
from .strategies import STRATEGY_IDS

ALL_STRATEGIES = list(STRATEGY_IDS)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_meta(out_dir: Path, command: str, flags: dict) -> None:
    doc = {"v": 1, "command": command, "version": __version__, "flags": flags}
    _atomic_write(out_dir / "run_meta.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_config_overrides(ctx, param, value):
    """--config file supplies defaults for any flag not given explicitly."""
    if value:
        overrides = json.loads(Path(value).read_text())
        ctx.default_map = {**overrides, **(ctx.default_map or {})}
    return value


CONFIG_OPTION = click.option(
    "--config",
    type=click.Path(exists=True),
    callback=_load_config_overrides,
    is_eager=True,
    expose_value=False,
    help="JSON file with default values for any flag.",
)


@click.group(context_settings={"auto_envvar_prefix": "ENVAL"})
@click.version_option(__version__)
def main():
    """Environment-aware active learning engine."""


@main.command("gen-task")
@CONFIG_OPTION
@click.option("--concepts", type=int, required=True, help="Number of task concepts.")
@click.option("--dim", type=int, required=True, help="Feature dimensionality.")
@click.option("--relevant", type=int, required=True, help="Number of concept-relevant dims.")
@click.option("--phases", type=int, default=3, show_default=True)
@click.option("--instances", type=int, default=10, show_default=True, help="Pool size per concept per phase.")
@click.option("--noise", type=float, default=0.25, show_default=True, help="Observation noise sigma.")
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--force", is_flag=True, help="Write into a non-empty directory.")
def cmd_gen_task(concepts, dim, relevant, phases, instances, noise, seed, out, force):
    """Generate a synthetic concept-grounding task dataset."""
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise click.ClickException(f"{out_dir} is not empty (use --force to overwrite)")
    dataset = generate_synthetic_task(
        num_concepts=concepts,
        feature_dim=dim,
        relevant_dim=relevant,
        phases=phases,
        instances_per_phase=instances,
        seed=seed,
        noise_sigma=noise,
    )
    save_task(dataset, out_dir)
    _write_meta(
        out_dir,
        "gen-task",
        {
            "concepts": concepts,
            "dim": dim,
            "relevant": relevant,
            "phases": phases,
            "instances": instances,
            "noise": noise,
            "seed": seed,
        },
    )
    click.echo(f"wrote task ({concepts} concepts, dim {dim}) to {out_dir}")


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


@main.command("run")
@CONFIG_OPTION
@click.option("--task", type=click.Path(exists=True), required=True, help="Task dataset directory.")
@click.option("--budgets", default="25,500", show_default=True)
@click.option("--times", default="40,150", show_default=True)
@click.option("--seeds", type=int, default=5, show_default=True, help="Runs per strategy per condition.")
@click.option("--strategies", default="all", show_default=True, help='Comma list or "all".')
@click.option("--weights", "weights_path", type=click.Path(exists=True), default=None, help="Weights file for dt-task-env.")
@click.option("--classifier", type=click.Choice(["gp", "linear"]), default="gp", show_default=True)
@click.option("--change-period", type=int, default=10, show_default=True)
@click.option("--scene-size", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Base seed; per-run seeds derive from it.")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--plot", is_flag=True, help="Also emit a PNG per condition.")
@click.option("--out", type=click.Path(), required=True)
def cmd_run(task, budgets, times, seeds, strategies, weights_path, classifier, change_period, scene_size, seed, jobs, plot, out):
    """Run the condition grid and emit curves, logs, and comparisons."""
    dataset = load_task(task)
    strategy_ids = ALL_STRATEGIES if strategies == "all" else [s.strip() for s in strategies.split(",")]
    unknown = [s for s in strategy_ids if s not in STRATEGY_IDS]
    if unknown:
        raise click.ClickException(f"unknown strategies: {unknown}")
    weights_map = {}
    if weights_path:
        weights_map["dt-task-env"] = load_weights(weights_path)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_seeds = [seeding.derive_seed(seed, i) for i in range(seeds)]

    comparison_rows = ["condition,baseline,u_statistic,p_value"]
    for budget in _parse_int_list(budgets):
        for time_alloc in _parse_int_list(times):
            condition = {"budget": budget, "time": time_alloc}
            tag = f"b{budget}_t{time_alloc}"
            curves, trajectories = run_condition(
                dataset,
                strategy_ids,
                condition,
                run_seeds,
                weights_map=weights_map,
                classifier=classifier,
                scene_change_period=change_period,
                scene_size=scene_size,
                n_jobs=jobs,
            )
            write_curves_csv(curves, out_dir / f"curves_{tag}.csv")
            for strategy_id, trajs in trajectories.items():
                for i, traj in enumerate(trajs):
                    write_trajectory(out_dir / f"traj_{tag}_{strategy_id}_{i:02d}.jsonl", traj)
            if plot:
                save_curve_plot(curves, out_dir / f"curves_{tag}.png", title=tag)
            if "dt-task-env" in curves and len(strategy_ids) >= 2:
                for other in strategy_ids:
                    if other == "dt-task-env":
                        continue
                    try:
                        stats = compare_strategies(curves["dt-task-env"], curves[other])
                        comparison_rows.append(
                            f"{tag},{other},{stats['u_statistic']!r},{stats['p_value']!r}"
                        )
                    except InsufficientData:
                        comparison_rows.append(f"{tag},{other},nan,nan")
            click.echo(f"condition {tag}: " + ", ".join(
                f"{sid}={curves[sid].points[-1][1]:.3f}" for sid in strategy_ids
            ))
    if len(comparison_rows) > 1:
        _atomic_write(out_dir / "comparisons.csv", "\n".join(comparison_rows) + "\n")
    _write_meta(
        out_dir,
        "run",
        {
            "task": str(task),
            "budgets": budgets,
            "times": times,
            "seeds": seeds,
            "strategies": strategies,
            "weights": weights_path,
            "classifier": classifier,
            "change_period": change_period,
            "scene_size": scene_size,
            "seed": seed,
        },
    )
    click.echo(f"outputs in {out_dir}")


@main.command("train-irl")
@CONFIG_OPTION
@click.option("--task", type=click.Path(exists=True), required=True)
@click.option("--demos", multiple=True, type=click.Path(exists=True), help="Demonstration files (repeatable).")
@click.option("--synthetic-expert", "use_expert", is_flag=True, help="Generate scripted expert demos first.")
@click.option("--demonstrations", type=int, default=3, show_default=True, help="Expert demos to generate.")
@click.option("--budget", type=int, default=15, show_default=True)
@click.option("--time", "time_alloc", type=int, default=30, show_default=True)
@click.option("--change-period", type=int, default=10, show_default=True)
@click.option("--scene-size", type=int, default=8, show_default=True)
@click.option("--max-iters", type=int, default=100, show_default=True)
@click.option("--learning-rate", type=float, default=4.0, show_default=True, help="Largest line-search step per iteration.")
@click.option("--rollouts", type=int, default=6, show_default=True)
@click.option("--beta", type=float, default=150.0, show_default=True, help="Softmax policy-model temperature.")
@click.option("--validation-episodes", type=int, default=6, show_default=True)
@click.option("--classifier", type=click.Choice(["gp", "linear"]), default="gp", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Weights file to write.")
@click.option("--log-out", type=click.Path(), default=None, help="Iteration log JSONL.")
def cmd_train_irl(task, demos, use_expert, demonstrations, budget, time_alloc, change_period, scene_size, max_iters, learning_rate, rollouts, beta, validation_episodes, classifier, seed, jobs, out, log_out):
    """Train dt-task-env weights from demonstrations."""
    from .gpc import make_classifier_factory

    dataset = load_task(task)
    factory = make_classifier_factory(classifier, dataset)
    env = EpisodeConfig(
        budget=budget,
        time_allocation=time_alloc,
        scene_change_period=change_period,
        scene_size=scene_size,
        seed=seed,
    )
    if use_expert:
        demo_set = synthetic_expert(
            dataset, env, ExpertSpec(), demonstrations=demonstrations, classifier_factory=factory
        )
    elif demos:
        demo_set = DemonstrationSet.from_trajectories(read_trajectory(p) for p in demos)
    else:
        raise click.ClickException("supply --demos files or --synthetic-expert")
    irl_config = IrlConfig(
        max_iterations=max_iters,
        learning_rate=learning_rate,
        rollouts_per_iteration=rollouts,
        temperature=beta,
        validation_episodes=validation_episodes,
        seed=seed,
    )
    try:
        result = train_weights(
            demo_set, irl_config, dataset, n_jobs=jobs, classifier_name=classifier
        )
    except EngineError as exc:
        raise click.ClickException(str(exc))
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(out_path, result.best_weights, demo_set.environment_config, result.best_validation_accuracy)
    if log_out:
        lines = [
            json.dumps(
                {
                    "v": 1,
                    "iteration": e.iteration,
                    "gradient_norm": e.gradient_norm,
                    "validation_accuracy": e.validation_accuracy,
                    "weights": list(e.weights),
                },
                sort_keys=True,
            )
            for e in result.iteration_log
        ]
        _atomic_write(Path(log_out), "\n".join(lines) + "\n")
    click.echo(
        f"best iteration {result.best_iteration} "
        f"(validation accuracy {result.best_validation_accuracy:.3f}); weights in {out_path}"
    )


@main.command("replay")
@click.option("--task", type=click.Path(exists=True), required=True)
@click.option("--classifier", type=click.Choice(["gp", "linear"]), default="gp", show_default=True)
@click.argument("trajectory_file", type=click.Path(exists=True))
def cmd_replay(task, classifier, trajectory_file):
    """Replay a logged trajectory offline and verify it reproduces exactly."""
    from .gpc import make_classifier_factory
    from .episode import EpisodeEngine

    dataset = load_task(task)
    logged = read_trajectory(trajectory_file)
    engine = EpisodeEngine(
        dataset, logged.config, classifier_factory=make_classifier_factory(classifier, dataset)
    )
    for step in logged.steps:
        scene = engine.observe()
        action = step.action
        answer = engine.answer_for(scene, action)
        replayed = engine.apply(scene, action, answer)
        if list(replayed.phi.as_array()) != list(step.phi.as_array()) or (
            abs(replayed.accuracy - step.accuracy) > 1e-12
        ):
            raise click.ClickException(f"divergence at turn {step.turn}")
    click.echo(f"replay ok: {len(logged.steps)} turns reproduce exactly")


@main.command("serve")
@CONFIG_OPTION
@click.option("--task-dir", "task_dirs", multiple=True, type=click.Path(exists=True), required=True, help="Task dataset directory (repeatable).")
@click.option("--sessions-dir", type=click.Path(), default="./sessions", show_default=True)
@click.option("--classifier", type=click.Choice(["gp", "linear"]), default="gp", show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8008, show_default=True)
def cmd_serve(task_dirs, sessions_dir, classifier, host, port):
    """Serve the live session API."""
    import uvicorn

    from .service import create_app

    tasks = {Path(d).name: load_task(d) for d in task_dirs}
    app = create_app(tasks, sessions_dir, classifier)
    click.echo(f"serving tasks {sorted(tasks)} on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
