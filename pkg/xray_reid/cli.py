import json
import logging
import math
import os
import re

import click

from .config import load_run_config
from .encoder import init_params, load_checkpoint, save_checkpoint
from .errors import CheckpointError, EvaluationError, ManifestError, ReidError
from .evaluation import evaluate, parse_setting
from .operations import (
    generate_synthetic,
    holdout_by_patient,
    load_manifest,
    save_manifest,
    schema_path_for,
    split_by_patient,
)
from .probe import attribute_baseline_encoder, run_probe
from .storage import staged_outputs
from .trainer import train

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.csv'
OOD_MANIFEST = 'ood.csv'
SPLIT_NAMES = ('train', 'val', 'test')
CHECKPOINT = 'encoder.ckpt'
HISTORY = 'history.csv'
REPORTS = 'reports.json'


def _write_manifests(items):
    """
    Write (path, DataSet) pairs with their schema sidecars

    Every manifest is reloaded from its temporary file and compared with the
    dataset before any destination is touched.
    """
    destinations = [p for path, _ in items for p in (path, schema_path_for(path))]
    with staged_outputs(destinations) as staged:
        for k, (path, dataset) in enumerate(items):
            tmp_manifest, tmp_schema = staged[2 * k], staged[2 * k + 1]
            save_manifest(dataset, tmp_manifest, tmp_schema)
            if load_manifest(tmp_manifest, tmp_schema) != dataset:
                raise ManifestError(f"{path} does not reload to the dataset that was written")
    for path, dataset in items:
        logger.info(f"Wrote {len(dataset)} records to {path}")


def _dump_json(payload, tmp_path, path):
    with open(tmp_path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2)
        handle.write('\n')
    with open(tmp_path, encoding='utf-8') as handle:
        # compared as text so NaN entries match themselves
        if json.dumps(json.load(handle)) != json.dumps(payload):
            raise ReidError(f"{path} does not reload to the report that was written")


def _safe_name(text):
    return re.sub(r'[^A-Za-z0-9_.-]+', '-', text)


def cmd_synth(run_config, out_dir):
    """Generate the synthetic manifest (and its OOD twin when configured)."""
    synthetic = run_config.require_synthetic()
    items = [(os.path.join(out_dir, MANIFEST), generate_synthetic(synthetic))]
    if synthetic.ood_shift is not None:
        items.append((os.path.join(out_dir, OOD_MANIFEST), generate_synthetic(synthetic.ood_config())))
    _write_manifests(items)
    return [path for path, _ in items]


def cmd_split(run_config, data_path, out_dir):
    """Patient-disjoint train/val/test manifests."""
    dataset = load_manifest(data_path)
    parts = split_by_patient(dataset, run_config.split)
    items = [(os.path.join(out_dir, f'{name}.csv'), part) for name, part in zip(SPLIT_NAMES, parts)]
    _write_manifests(items)
    return [path for path, _ in items]


def cmd_train(run_config, data_path, out_checkpoint, val_path=None):
    """
    Train an encoder and write the checkpoint plus a history CSV beside it.

    Returns:
        tuple: (checkpoint path, history path)
    """
    train_set = load_manifest(data_path)
    val_set = load_manifest(val_path) if val_path else None
    initial = init_params(run_config.encoder_config(train_set.ambient_dim))
    params, history = train(run_config.train, initial, train_set, val_set)

    history_path = os.path.join(os.path.dirname(os.path.abspath(out_checkpoint)), HISTORY)
    with staged_outputs([out_checkpoint, history_path]) as (tmp_checkpoint, tmp_history):
        save_checkpoint(params, tmp_checkpoint)
        if load_checkpoint(tmp_checkpoint) != params:
            raise CheckpointError(f"{out_checkpoint} does not reload to the trained parameters")
        history.save_csv(tmp_history)
    logger.info(f"Wrote checkpoint {out_checkpoint} and {len(history)} history rows to {history_path}")
    return out_checkpoint, history_path


def cmd_eval(run_config, checkpoint, data_path, out_report, val_path=None, ood_path=None,
             baseline_attribute=None, baseline_train=None):
    """
    Verification reports for every configured setting

    Writes a JSON array of reports to ``out_report`` and one
    ``roc_<model>_<setting>.csv`` per report next to it. With
    ``baseline_attribute`` the attribute-classifier baseline is trained on
    ``baseline_train`` and reported under the same settings.

    Returns:
        list: VerificationReport objects in output order
    """
    eval_config = run_config.eval
    params = load_checkpoint(checkpoint)
    dataset = load_manifest(data_path)
    val_set = load_manifest(val_path) if val_path else None
    ood_set = load_manifest(ood_path) if ood_path else None
    settings = [parse_setting(text, ood_set) for text in eval_config.settings]

    models = [('recognition', params)]
    if baseline_attribute is not None:
        if baseline_train is None:
            raise EvaluationError("the attribute baseline needs a training manifest", setting='baseline')
        probe_config = run_config.probe_config(baseline_attribute)
        models.append((
            f'attribute:{baseline_attribute}',
            attribute_baseline_encoder(load_manifest(baseline_train), baseline_attribute, probe_config),
        ))

    reports = []
    for model, model_params in models:
        reports.extend(evaluate(
            model_params, dataset, settings, (eval_config.n_pos, eval_config.n_neg), eval_config.seed,
            validation_dataset=val_set, fpr_targets=eval_config.fpr_targets,
            lower_is_same=eval_config.lower_is_same, model=model,
        ))

    for report in reports:
        if not 0.0 <= report.auroc <= 1.0 or not math.isfinite(report.threshold):
            raise EvaluationError(f"report for '{report.setting}' failed validation", setting=report.setting)
    out_dir = os.path.dirname(os.path.abspath(out_report))
    curve_paths = [
        os.path.join(out_dir, f'roc_{_safe_name(report.model)}_{_safe_name(report.setting)}.csv')
        for report in reports
    ]
    with staged_outputs(curve_paths + [out_report]) as staged:
        for report, tmp_path in zip(reports, staged):
            report.curve.to_frame().to_csv(tmp_path, index=False, lineterminator='\n')
        _dump_json([report.to_dict() for report in reports], staged[-1], out_report)
    logger.info(f"Wrote {len(reports)} reports to {out_report}")
    return reports


def cmd_probe(run_config, checkpoint, data_path, out_report, test_path=None, attribute=None):
    """
    Linear probe on frozen embeddings

    Without ``test_path`` a ``probe.holdout_fraction`` share of patients from
    ``data_path`` is held out.
    """
    probe_config = run_config.probe_config(attribute)
    params = load_checkpoint(checkpoint)
    dataset = load_manifest(data_path)
    dataset.require_attribute(probe_config.task_attribute)
    if test_path:
        train_set, test_set = dataset, load_manifest(test_path)
    else:
        train_set, test_set = holdout_by_patient(dataset, probe_config.holdout_fraction, probe_config.seed)
    report = run_probe(params, train_set, test_set, probe_config)
    with staged_outputs([out_report]) as (tmp_report,):
        _dump_json(report.to_dict(), tmp_report, out_report)
    logger.info(f"Wrote {out_report}")
    return report


def _default(ctx, path, name):
    return path if path is not None else os.path.join(ctx.obj['out_dir'], name)


def _existing(path):
    return path if path is not None and os.path.exists(path) else None


def configure_commands(cli):
    """
    Register the pipeline subcommands on the click group.

    Args:
        cli: The click group built by ``create_app``.

    Returns:
        None
    """

    def run_config_for(ctx):
        return load_run_config(ctx.obj['config_path'], ctx.obj['seed'], ctx.obj['overrides'])

    def fail(ctx, command, error):
        logger.error(f"Error in {command} command: {str(error)}")
        click.echo(f"Error: {error}", err=True)
        ctx.exit(1)

    @cli.command()
    @click.pass_context
    def synth(ctx):
        """Generate a synthetic manifest (and ood.csv when [synthetic.ood] is set) in --out."""
        try:
            for path in cmd_synth(run_config_for(ctx), ctx.obj['out_dir']):
                click.echo(path)
        except (ReidError, OSError) as e:
            fail(ctx, 'synth', e)

    @cli.command()
    @click.option('--data', type=click.Path(dir_okay=False), default=None,
                  help='Manifest to split [default: <out>/manifest.csv].')
    @click.pass_context
    def split(ctx, data):
        """Write patient-disjoint train.csv, val.csv and test.csv to --out."""
        try:
            paths = cmd_split(run_config_for(ctx), _default(ctx, data, MANIFEST), ctx.obj['out_dir'])
            for path in paths:
                click.echo(path)
        except (ReidError, OSError) as e:
            fail(ctx, 'split', e)

    @cli.command(name='train')
    @click.option('--data', type=click.Path(dir_okay=False), default=None,
                  help='Training manifest [default: <out>/train.csv].')
    @click.option('--val', type=click.Path(dir_okay=False), default=None,
                  help='Validation manifest [default: <out>/val.csv when present].')
    @click.option('--checkpoint', type=click.Path(dir_okay=False), default=None,
                  help='Checkpoint to write [default: <out>/encoder.ckpt].')
    @click.pass_context
    def train_command(ctx, data, val, checkpoint):
        """Train the encoder with triplet loss; history.csv is written beside the checkpoint."""
        try:
            val_path = val if val is not None else _existing(_default(ctx, None, 'val.csv'))
            written = cmd_train(
                run_config_for(ctx), _default(ctx, data, 'train.csv'), _default(ctx, checkpoint, CHECKPOINT),
                val_path=val_path,
            )
            for path in written:
                click.echo(path)
        except (ReidError, OSError) as e:
            fail(ctx, 'train', e)

    @cli.command(name='eval')
    @click.option('--checkpoint', type=click.Path(dir_okay=False), default=None,
                  help='Encoder checkpoint [default: <out>/encoder.ckpt].')
    @click.option('--data', type=click.Path(dir_okay=False), default=None,
                  help='Test manifest [default: <out>/test.csv].')
    @click.option('--val', type=click.Path(dir_okay=False), default=None,
                  help='Threshold calibration manifest [default: <out>/val.csv when present].')
    @click.option('--ood', type=click.Path(dir_okay=False), default=None,
                  help="Shifted manifest for the 'ood' setting [default: <out>/ood.csv when present].")
    @click.option('--baseline-attribute', default=None,
                  help='Also report the attribute-classifier baseline for this attribute.')
    @click.option('--baseline-train', type=click.Path(dir_okay=False), default=None,
                  help='Manifest the baseline is trained on [default: <out>/train.csv].')
    @click.option('--report', type=click.Path(dir_okay=False), default=None,
                  help='Report file [default: <out>/reports.json].')
    @click.pass_context
    def eval_command(ctx, checkpoint, data, val, ood, baseline_attribute, baseline_train, report):
        """Evaluate verification under each configured pair setting."""
        try:
            reports = cmd_eval(
                run_config_for(ctx),
                _default(ctx, checkpoint, CHECKPOINT),
                _default(ctx, data, 'test.csv'),
                _default(ctx, report, REPORTS),
                val_path=val if val is not None else _existing(_default(ctx, None, 'val.csv')),
                ood_path=ood if ood is not None else _existing(_default(ctx, None, OOD_MANIFEST)),
                baseline_attribute=baseline_attribute,
                baseline_train=_default(ctx, baseline_train, 'train.csv') if baseline_attribute else None,
            )
            for item in reports:
                click.echo(f"{item.model}\t{item.setting}\tauroc={item.auroc:.4f}\teer={item.eer:.4f}")
        except (ReidError, OSError) as e:
            fail(ctx, 'eval', e)

    @cli.command()
    @click.option('--checkpoint', type=click.Path(dir_okay=False), default=None,
                  help='Frozen encoder checkpoint [default: <out>/encoder.ckpt].')
    @click.option('--data', type=click.Path(dir_okay=False), default=None,
                  help='Probe training manifest [default: <out>/train.csv].')
    @click.option('--test', type=click.Path(dir_okay=False), default=None,
                  help='Held-out manifest; without it probe.holdout_fraction of patients is held out.')
    @click.option('--attribute', default=None, help='Task attribute (overrides probe.task_attribute).')
    @click.option('--report', type=click.Path(dir_okay=False), default=None,
                  help='Report file [default: <out>/probe_<attribute>.json].')
    @click.pass_context
    def probe(ctx, checkpoint, data, test, attribute, report):
        """Train a linear probe on frozen embeddings and report accuracy against the majority baseline."""
        try:
            run_config = run_config_for(ctx)
            task = run_config.probe_config(attribute).task_attribute
            result = cmd_probe(
                run_config,
                _default(ctx, checkpoint, CHECKPOINT),
                _default(ctx, data, 'train.csv'),
                _default(ctx, report, f'probe_{_safe_name(task)}.json'),
                test_path=test,
                attribute=attribute,
            )
            click.echo(f"{result.task}\taccuracy={result.accuracy:.4f}\tmajority_baseline={result.majority_baseline:.4f}")
        except (ReidError, OSError) as e:
            fail(ctx, 'probe', e)
