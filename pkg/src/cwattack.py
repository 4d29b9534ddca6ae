import functools
import logging
from pathlib import Path

import click

import config as config
from entry import (
    RunLayout,
    attack_entry,
    detect_entry,
    eval_entry,
    gen_data_entry,
    train_entry,
    transfer_entry,
)
from errors import (
    ArtifactMissingError,
    AttackConfigError,
    RejectedInputError,
    TrainingFailureError,
    UndefinedMetricError,
)
from run_config import RunConfig, load_run_config

CONTEXT_SETTINGS = dict(help_option_names=['-h', '--help'])


class ConfigUsageError(click.ClickException):
    exit_code = 2


class MissingArtifactError(click.ClickException):
    exit_code = 3


def handle_errors(func):
    """Map domain errors to exit codes: 2 for configuration, 3 for missing files."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (AttackConfigError, RejectedInputError) as exc:
            logging.error("Configuration error: %s", exc)
            raise ConfigUsageError(str(exc)) from exc
        except (ArtifactMissingError, FileNotFoundError) as exc:
            logging.error("Missing artifact: %s", exc)
            raise MissingArtifactError(str(exc)) from exc
        except TrainingFailureError as exc:
            logging.error("Training failed: %s", exc, exc_info=True)
            raise click.ClickException(str(exc)) from exc
        except UndefinedMetricError as exc:
            logging.error("Metric undefined: %s", exc)
            raise click.ClickException(str(exc)) from exc
    return wrapper


def config_option(func):
    func = click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path),
                        help="Overrides output_dir of the config")(func)
    func = click.option("--config", "config_path", type=click.Path(path_type=Path),
                        help="JSON run configuration (defaults apply when omitted)")(func)
    return func


def _load(config_path, overrides) -> RunConfig:
    cfg = load_run_config(config_path)
    return cfg.with_overrides(overrides) if any(v is not None for v in overrides.values()) else cfg


def _default_model(cfg: RunConfig, model_path):
    return model_path or RunLayout(cfg.output_dir).model_path(cfg.train.seeds[0])


@click.command(name="gen-data", context_settings=CONTEXT_SETTINGS)
@config_option
@click.option("--seed", type=int, help="Overrides dataset.train_seed")
@handle_errors
def gen_data(config_path, output_dir, seed):
    """Generate the synthetic train and held-out scene sets."""
    cfg = _load(config_path, {"output_dir": output_dir and str(output_dir), "dataset.train_seed": seed})
    train_dir, test_dir = gen_data_entry(cfg)
    click.secho(f"Wrote {cfg.dataset.train_count} training scenes to {train_dir}", fg="green")
    click.secho(f"Wrote {cfg.dataset.test_count} held-out scenes to {test_dir}", fg="green")


@click.command(context_settings=CONTEXT_SETTINGS)
@config_option
@click.option("--seed", "seeds", type=int, multiple=True, help="Training seed; may repeat")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), help="Training dataset directory")
@handle_errors
def train(config_path, output_dir, seeds, data_dir):
    """Train one detector per seed."""
    cfg = _load(config_path, {"output_dir": output_dir and str(output_dir),
                              "train.seeds": list(seeds) if seeds else None})
    for path in train_entry(cfg, data_dir=data_dir):
        click.secho(f"Saved model {path}", fg="green")


@click.command(context_settings=CONTEXT_SETTINGS)
@config_option
@click.option("--model", "model_path", type=click.Path(path_type=Path), help="Model file")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), help="Dataset directory")
@handle_errors
def detect(config_path, output_dir, model_path, data_dir):
    """Run a detector over a dataset and write its detections."""
    cfg = _load(config_path, {"output_dir": output_dir and str(output_dir)})
    path = detect_entry(cfg, _default_model(cfg, model_path), data_dir)
    click.echo(f"Wrote detections to {path}")


@click.command(context_settings=CONTEXT_SETTINGS)
@config_option
@click.option("--method", type=click.Choice(["sca", "dca"]), help="Overrides attack.method")
@click.option("--model", "model_path", type=click.Path(path_type=Path), help="Model file")
@click.option("--data", "data_dir", type=click.Path(path_type=Path), help="Dataset directory")
@click.option("--detected-only/--with-runner-up", default=None,
              help="Attack detected pixels only (runner-up ablation)")
@handle_errors
def attack(config_path, output_dir, method, model_path, data_dir, detected_only):
    """Attack every image of a dataset with SCA or DCA."""
    cfg = _load(config_path, {"output_dir": output_dir and str(output_dir), "attack.method": method,
                              "attack.detected_only": detected_only})
    out = attack_entry(cfg, _default_model(cfg, model_path), data_dir)
    click.secho(f"Wrote adversarial images and telemetry to {out}", fg="green")


@click.command(name="eval", context_settings=CONTEXT_SETTINGS)
@config_option
@click.option("--attack-dir", type=click.Path(path_type=Path), required=True, help="Output of 'attack'")
@click.option("--model", "model_path", type=click.Path(path_type=Path), help="Defaults to the attacked model")
@click.option("--html/--no-html", default=False, help="Also write an offline HTML report")
@handle_errors
def evaluate(config_path, output_dir, attack_dir, model_path, html):
    """Compute mAP, ASR and perceptibility for an attack run."""
    cfg = _load(config_path, {"output_dir": output_dir and str(output_dir)})
    report, path = eval_entry(cfg, attack_dir, model_path, html=html)
    click.echo(f"mAP clean {report.map_clean:.4f} | attack {report.map_attack:.4f} | ASR {report.asr:.4f}")
    click.echo(f"P_L2 {report.p_l2:.5f} | P_L0 {report.p_l0:.4f}")
    click.secho(f"Wrote {path}", fg="green")


@click.command(context_settings=CONTEXT_SETTINGS)
@config_option
@click.option("--attack-dir", type=click.Path(path_type=Path), required=True, help="Output of 'attack'")
@click.option("--target-model", "target_models", type=click.Path(path_type=Path), multiple=True, required=True,
              help="Black-box target model; may repeat")
@click.option("--model", "model_path", type=click.Path(path_type=Path), help="Defaults to the attacked model")
@handle_errors
def transfer(config_path, output_dir, attack_dir, target_models, model_path):
    """Evaluate an adversarial set on other detectors."""
    cfg = _load(config_path, {"output_dir": output_dir and str(output_dir)})
    for report, path in transfer_entry(cfg, attack_dir, target_models, model_path):
        click.echo(f"{report.origin_model} -> {report.target_model}: ASR {report.asr_target:.4f} "
                   f"ATR {report.atr:.4f}")
        click.secho(f"Wrote {path}", fg="green")


@click.version_option(version=config.VERSION, prog_name='cwattack')
@click.group(context_settings=CONTEXT_SETTINGS,
             help=f'''
                      Category-wise Attack Lab {config.VERSION}

                      Sparse (SCA) and dense (DCA) category-wise adversarial attacks
                      against a small anchor-free keypoint detector, with the data,
                      training and evaluation harness around them.
                    ''')
def cli():
    logging.basicConfig(filename='cwattack.log',
                        format="%(asctime)s.%(msecs)03d | %(levelname)s | %(threadName)s | %(message)s",
                        datefmt="%Y-%m-%d | %H:%M:%S",
                        encoding="utf-8",
                        level=logging.DEBUG if config.DEBUG else logging.INFO)
    logging.info(" ***** cwattack %s starts *****", config.VERSION)


cli.add_command(gen_data)
cli.add_command(train)
cli.add_command(detect)
cli.add_command(attack)
cli.add_command(evaluate)
cli.add_command(transfer)


def main():
    cli()


if __name__ == '__main__':
    main()
