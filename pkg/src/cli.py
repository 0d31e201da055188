"""
consistencydet command line: train, infer, eval, schedule dump, data synth, sweep
"""

import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from statistics import mean
from typing import Dict, List, Optional

import click
from dotenv import load_dotenv

from src.config.settings import LOG_LEVEL_ENV, Settings, load_settings, resolve_device
from src.data.coco import load_coco, write_coco
from src.data.records import DetectionDataset, load_image_dir
from src.data.sources import load_split
from src.data.synthetic import generate_synthetic
from src.errors import ConfigError, ConsistencyDetError, DatasetError
from src.evalkit.coco_eval import evaluate
from src.evalkit.runner import detect_dataset, evaluate_model
from src.output.overlay import write_overlay
from src.output.results import detections_to_coco, load_results, write_results
from src.sampler.sampler import SamplerConfig
from src.schedule.noise_schedule import NoiseSchedule
from src.storage.checkpoints import load_checkpoint, restore_detector
from src.storage.manifest import ManifestStore, RunManifest
from src.trainer.trainer import train as run_training

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
SWEEP_PARAMS = {
    'box-renewal': ('B_th', float),
    'nms': ('N_th', float),
    'steps': ('n_ss', int),
    'proposals': ('n_p', int),
}
REPORT_FIELDS = ('AP', 'AP50', 'AP75', 'APs', 'APm', 'APl')


@dataclass
class RunContext:
    """Global flags shared by every subcommand"""

    config_path: Optional[str]
    seed: Optional[int]
    out_dir: Path
    argv: List[str]

    def settings(self, overrides: Optional[Dict] = None) -> Settings:
        return load_settings(self.config_path, dict(overrides or {}, seed=self.seed))

    def manifest(self, command: str, settings: Optional[Settings] = None) -> RunManifest:
        if settings is None:
            return RunManifest(command=command, argv=self.argv, config={}, seed=self.seed)
        return RunManifest(command=command, argv=self.argv, config=settings.echo(), seed=settings.seed)

    def recording(self, command: str, settings: Optional[Settings] = None):
        return ManifestStore(self.out_dir).recording(self.manifest(command, settings))


def setup_logging(out_dir: Path, level: str):
    """File log under <out-dir>/logs plus stderr, so stdout stays machine-readable"""
    log_dir = out_dir / 'logs'
    log_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_dir / 'consistencydet.log'),
            logging.StreamHandler(sys.stderr),
        ],
        force=True,
    )


def _restore_with_seed(run: RunContext, checkpoint: str, device: str):
    blob = load_checkpoint(checkpoint, device)
    model, settings = restore_detector(blob, device=device)
    if run.seed is not None:
        settings = settings.model_copy(update={'seed': run.seed})
    return blob, model, settings


@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='YAML or JSON config file')
@click.option('--seed', type=int, default=None, help='Global seed (overrides the config)')
@click.option('--out-dir', type=click.Path(file_okay=False), default='runs/latest', show_default=True)
@click.option('--log-level', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False),
              default=None, help=f'Defaults to ${LOG_LEVEL_ENV} or INFO')
@click.pass_context
def cli(ctx, config_path, seed, out_dir, log_level):
    """Few-step consistency-model object detection"""
    out_dir = Path(out_dir)
    setup_logging(out_dir, log_level or os.getenv(LOG_LEVEL_ENV, 'INFO'))
    argv = ctx.obj.get('argv', []) if isinstance(ctx.obj, dict) else []
    ctx.obj = RunContext(config_path=config_path, seed=seed, out_dir=out_dir, argv=list(argv))


# --- train -----------------------------------------------------------------

@cli.command()
@click.option('--iterations', type=int, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--device', default=None, help='torch device (default $CONSISTENCYDET_DEVICE or cpu)')
@click.option('--eval/--no-eval', 'run_eval', default=True, show_default=True,
              help='Evaluate the final checkpoint on the val split')
@click.pass_obj
def train(run: RunContext, iterations, batch_size, device, run_eval):
    """Train a detector from scratch"""
    settings = run.settings({'trainer.iterations': iterations, 'trainer.batch_size': batch_size})
    device = resolve_device(device)

    with run.recording('train', settings) as manifest:
        logger.info(f"🚀 Training ConsistencyDet (seed {settings.seed}, device {device})")
        manifest.artifacts['metrics'] = str(run.out_dir / 'metrics.jsonl')
        dataset = load_split(settings.data, 'train')
        checkpoint = run_training(dataset, settings, run.out_dir, device=device)
        manifest.artifacts['checkpoint'] = str(checkpoint)

        if run_eval:
            model, _ = restore_detector(load_checkpoint(checkpoint, device), device=device)
            report, _ = evaluate_model(model, load_split(settings.data, 'val'),
                                       SamplerConfig.from_settings(settings))
            report_path = run.out_dir / 'eval_report.json'
            report_path.write_text(json.dumps(report.as_dict(), indent=2))
            manifest.artifacts['eval_report'] = str(report_path)
            click.echo(json.dumps(report.as_dict()))

    click.echo(str(checkpoint))


# --- infer -----------------------------------------------------------------

def _inference_dataset(images: str, categories: List[str]) -> DetectionDataset:
    path = Path(images)
    if path.is_dir():
        return load_image_dir(path, categories)
    dataset = load_coco(path)
    if len(dataset.categories) < len(categories):
        raise DatasetError(f"{path} declares {len(dataset.categories)} categories but the checkpoint "
                           f"predicts {len(categories)}")
    return dataset


@cli.command()
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False))
@click.option('--images', required=True, type=click.Path(exists=True),
              help='Image directory or COCO annotation file')
@click.option('--steps', 'n_ss', type=int, default=None)
@click.option('--proposals', 'n_p', type=int, default=None)
@click.option('--box-renewal', 'B_th', type=float, default=None)
@click.option('--nms', 'N_th', type=float, default=None)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None,
              help='COCO results file (default <out-dir>/results.json)')
@click.option('--overlay', 'overlay_dir', type=click.Path(file_okay=False), default=None)
@click.option('--device', default=None)
@click.pass_obj
def infer(run: RunContext, checkpoint, images, n_ss, n_p, B_th, N_th, out_path, overlay_dir, device):
    """Detect objects in images with a trained checkpoint"""
    device = resolve_device(device)
    with run.recording('infer') as manifest:
        manifest.artifacts['checkpoint'] = str(checkpoint)
        blob, model, settings = _restore_with_seed(run, checkpoint, device)
        config = SamplerConfig.from_settings(settings, n_ss=n_ss, n_p=n_p, B_th=B_th, N_th=N_th)
        manifest.config = settings.echo()
        manifest.config['sampler'] = {'n_ss': config.n_ss, 'n_p': config.n_p, 'B_th': config.B_th,
                                      'N_th': config.N_th, 'score_floor': config.score_floor}
        manifest.seed = settings.seed

        dataset = _inference_dataset(images, blob.get('categories') or [])
        detections, seconds = detect_dataset(model, dataset, config, progress=True)
        out_path = Path(out_path) if out_path else run.out_dir / 'results.json'
        write_results(detections_to_coco(detections, dataset), out_path)
        manifest.artifacts['results'] = str(out_path)

        if overlay_dir:
            for image_id, dets in detections.items():
                record = dataset.by_id(image_id)
                name = Path(record.file_name or f"{image_id:06d}.png").with_suffix('.png').name
                write_overlay(record.load_image(), dets, dataset.categories, Path(overlay_dir) / name)
            manifest.artifacts['overlay'] = str(overlay_dir)

        if seconds:
            logger.info(f"⏱️  {mean(seconds) * 1000:.1f} ms per image over {len(seconds)} images")
    click.echo(str(out_path))


# --- eval ------------------------------------------------------------------

@cli.command(name='eval')
@click.option('--results', required=True, type=click.Path(dir_okay=False))
@click.option('--annotations', required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def eval_command(run: RunContext, results, annotations):
    """Score a COCO results file against COCO ground truth"""
    with run.recording('eval') as manifest:
        manifest.artifacts.update(results=str(results), annotations=str(annotations))
        ground_truth = load_coco(annotations)
        report = evaluate(load_results(results, ground_truth), ground_truth)
        report_path = run.out_dir / 'eval_report.json'
        report_path.write_text(json.dumps(report.as_dict(), indent=2))
        manifest.artifacts['eval_report'] = str(report_path)
    click.echo(report.table())
    click.echo(json.dumps(report.as_dict()))


# --- schedule --------------------------------------------------------------

@cli.group()
def schedule():
    """Noise schedule utilities"""


@schedule.command()
@click.option('--T', 'total_steps', type=int, default=40, show_default=True)
@click.option('--sigma-min', type=float, default=0.002, show_default=True)
@click.option('--sigma-max', type=float, default=80.0, show_default=True)
@click.option('--rho', type=float, default=7.0, show_default=True)
@click.option('--sigma-data', type=float, default=0.5, show_default=True)
@click.pass_obj
def dump(run: RunContext, total_steps, sigma_min, sigma_max, rho, sigma_data):
    """CSV table of t, sigma, c_in, c_skip, c_out"""
    with run.recording('schedule dump') as manifest:
        manifest.config = {'schedule': {'T': total_steps, 'sigma_min': sigma_min, 'sigma_max': sigma_max,
                                        'rho': rho, 'sigma_data': sigma_data}}
        noise = NoiseSchedule(sigma_min=sigma_min, sigma_max=sigma_max, rho=rho,
                              total_steps=total_steps, sigma_data=sigma_data)
        rows = [{k: (v if k == 't' else f"{v:.10g}") for k, v in row.items()} for row in noise.table()]
    click.echo(_csv_text(['t', 'sigma', 'c_in', 'c_skip', 'c_out'], rows), nl=False)


# --- data ------------------------------------------------------------------

@cli.group()
def data():
    """Dataset utilities"""


@data.command()
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
@click.option('--count', type=int, default=100, show_default=True)
@click.option('--image-size', type=int, default=None)
@click.option('--max-objects', type=int, default=None)
@click.option('--num-classes', type=int, default=None)
@click.pass_obj
def synth(run: RunContext, out_dir, count, image_size, max_objects, num_classes):
    """Write synthetic shapes images and a COCO annotation file"""
    settings = run.settings({'data.image_size': image_size, 'data.max_objects': max_objects,
                             'data.num_classes': num_classes})
    with run.recording('data synth', settings) as manifest:
        manifest.config['synth_count'] = count
        dataset = generate_synthetic(settings.seed, count, settings.data.image_size,
                                     settings.data.max_objects, settings.data.num_classes)
        annotation_path = write_coco(dataset, out_dir)
        manifest.artifacts['annotations'] = str(annotation_path)
    click.echo(str(annotation_path))


# --- sweep -----------------------------------------------------------------

@cli.command()
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False))
@click.option('--param', required=True, type=click.Choice(sorted(SWEEP_PARAMS)))
@click.option('--values', required=True, help='Comma-separated values, e.g. 0,0.9,0.98,1.0')
@click.option('--annotations', type=click.Path(dir_okay=False), default=None,
              help='COCO ground truth (default: the checkpoint config\'s val split)')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None,
              help='CSV file (default <out-dir>/sweep.csv, also echoed to stdout)')
@click.option('--device', default=None)
@click.pass_obj
def sweep(run: RunContext, checkpoint, param, values, annotations, out_path, device):
    """Evaluate one checkpoint over a grid of one sampler parameter"""
    field_name, cast = SWEEP_PARAMS[param]
    try:
        grid = [cast(v) for v in values.split(',') if v.strip()]
    except ValueError:
        raise click.BadParameter(f"cannot parse '{values}' as {cast.__name__} values", param_hint='--values')
    if not grid:
        raise click.BadParameter('no values given', param_hint='--values')

    device = resolve_device(device)
    csv_path = Path(out_path) if out_path else run.out_dir / 'sweep.csv'
    with run.recording('sweep') as manifest:
        manifest.artifacts['checkpoint'] = str(checkpoint)
        _, model, settings = _restore_with_seed(run, checkpoint, device)
        manifest.config = settings.echo()
        manifest.config['sweep'] = {'param': param, 'values': grid}
        manifest.seed = settings.seed
        dataset = load_coco(annotations) if annotations else load_split(settings.data, 'val')
        base = SamplerConfig.from_settings(settings)

        rows = []
        for value in grid:
            logger.info(f"🔍 Sweeping {param}={value}")
            report, seconds = evaluate_model(model, dataset, replace(base, **{field_name: value}))
            row = {'param': param, 'value': value}
            row.update({name: f"{getattr(report, name):.6f}" for name in REPORT_FIELDS})
            row['seconds_per_image'] = f"{mean(seconds) if seconds else 0.0:.6f}"
            rows.append(row)

        text = _csv_text(['param', 'value', *REPORT_FIELDS, 'seconds_per_image'], rows)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(text)
        manifest.artifacts['csv'] = str(csv_path)

    if out_path:
        click.echo(str(csv_path))
    else:
        click.echo(text, nl=False)


def _csv_text(fieldnames, rows) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fieldnames, lineterminator='\n')
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


# --- entry point -----------------------------------------------------------

def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI; returns 0 on success, 1 on errors, 2 on usage errors"""
    load_dotenv()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        click.echo(cli.get_help(click.Context(cli, info_name='consistencydet')), err=True)
        return 2
    try:
        cli.main(args=argv, prog_name='consistencydet', standalone_mode=False, obj={'argv': argv})
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        click.echo('Aborted!', err=True)
        return 1
    except ConfigError as e:
        click.echo(f"config error ({e.key}): {e}", err=True)
        return 1
    except ConsistencyDetError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        click.echo(f"error: {e}", err=True)
        return 1
    except Exception as e:
        logger.error(f"❌ Unexpected {type(e).__name__}: {e}", exc_info=True)
        click.echo(f"error: unexpected {type(e).__name__}: {e}", err=True)
        return 1
    return 0
