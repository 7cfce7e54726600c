import json
import logging
from pathlib import Path

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler

from gsir import params
from gsir.bench import SUITES, BenchConfig, run_suite
from gsir.core import check_same_shape
from gsir.corpus import load_corpus
from gsir.encoder import EncodeJob, decode_file, encode_file
from gsir.errors import EXIT_IO, EXIT_USAGE, GsirError
from gsir.imageio import read_image, write_pgm
from gsir.metrics import grid_shape, ms_ssim, psnr, quality_maps, ssim
from gsir.quant import RangeStrategy
from gsir.reports import REPORTS, EvalReport, TrainReport
from gsir.rng import named_rng
from gsir.stagewise.config import load_train_config
from gsir.stagewise.control import token_origins
from gsir.stagewise.predictor import TinyLinearPredictor, load_weights, save_weights
from gsir.stagewise.training import finetune_train, load_checkpoint, pod_train

log = logging.getLogger("gsir")


class GsirGroup(click.Group):
    """Maps library errors to exit codes: usage 2, I/O 3, format 4, numeric 5."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except GsirError as e:
            log.error(str(e))
            ctx.exit(e.exit_code)
        except ValidationError as e:
            log.error(str(e))
            ctx.exit(EXIT_USAGE)
        except OSError as e:
            log.error(f"{e.__class__.__name__}: {e}")
            ctx.exit(EXIT_IO)


def _emit(report) -> None:
    click.echo(report.model_dump_json(indent=2))


@click.group(cls=GsirGroup)
@click.option("-v", "--verbose", count=True, help="-v info, -vv debug")
@click.option("--seed", type=int, default=params.default_seed, show_default=True)
@click.pass_context
def main(ctx, verbose, seed):
    """2D Gaussian splatting image representation."""
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(verbose, 2)]
    logging.basicConfig(level=level, format="%(message)s", datefmt="[%X]", force=True,
                        handlers=[RichHandler(console=Console(stderr=True), show_path=False)])
    ctx.obj = {"seed": seed}


@main.command()
@click.argument("input_path", type=click.Path(dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
@click.option("-p", "--patch-size", type=int, default=params.patch_size, show_default=True)
@click.option("-s", "--stages", "n_stages", type=int, default=params.n_stages, show_default=True)
@click.option("--tau-psnr", type=float, default=params.tau_psnr, show_default=True)
@click.option("--tau-ssim", type=float, default=params.tau_ssim, show_default=True)
@click.option("--predictor", default="heuristic", show_default=True, help="heuristic or tiny:<weights>")
@click.option("-k", "--refine-steps", type=int, default=0, show_default=True)
@click.option("--strategy", type=click.Choice([s.value for s in RangeStrategy]),
              default=RangeStrategy.ADAPTIVE.value, show_default=True)
@click.option("--bits", type=int, default=None, help="one bit width for every attribute")
def encode(input_path, output, patch_size, n_stages, tau_psnr, tau_ssim, predictor, refine_steps, strategy, bits):
    """Encode an image into a .gsir stream and print the report."""
    job = EncodeJob(input=input_path, output=output, patch_size=patch_size, n_stages=n_stages,
                    tau_psnr=tau_psnr, tau_ssim=tau_ssim, predictor=predictor,
                    refine_steps=refine_steps, strategy=strategy, bits=bits)
    _emit(encode_file(job))


@main.command()
@click.argument("input_path", type=click.Path(dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
@click.option("--prefix", "prefix_dir", type=click.Path(file_okay=False), default=None,
              help="also write every stage prefix here")
@click.option("--density", "density_path", type=click.Path(dir_okay=False), default=None,
              help="PGM density map of the centers (CSV alongside)")
@click.option("--cell", type=int, default=8, show_default=True)
def decode(input_path, output, prefix_dir, density_path, cell):
    """Render a .gsir stream to PNG."""
    _emit(decode_file(input_path, output, prefix_dir, density_path, cell))


@main.command(name="eval")
@click.argument("recon_path", type=click.Path(dir_okay=False))
@click.argument("reference_path", type=click.Path(dir_okay=False))
@click.option("--maps", "maps_dir", type=click.Path(file_okay=False), default=None,
              help="write per-patch PSNR/SSIM maps (CSV + PGM) here")
@click.option("-p", "--patch-size", type=int, default=params.patch_size, show_default=True)
def eval_cmd(recon_path, reference_path, maps_dir, patch_size):
    """PSNR, SSIM and MS-SSIM of a reconstruction against its reference."""
    recon, reference = read_image(recon_path), read_image(reference_path)
    check_same_shape(recon, reference)
    report = EvalReport(psnr=psnr(recon, reference), ssim=ssim(recon, reference),
                        ms_ssim=ms_ssim(recon, reference), patch_size=patch_size)
    if maps_dir is not None:
        maps_dir = Path(maps_dir)
        maps_dir.mkdir(parents=True, exist_ok=True)
        maps = quality_maps(reference, recon, patch_size)
        h, w = reference.shape[:2]
        origins = token_origins(grid_shape(h, w, patch_size), patch_size)
        frame = pd.DataFrame({
            "row": np.repeat(np.arange(maps.shape[0]), maps.shape[1]),
            "col": np.tile(np.arange(maps.shape[1]), maps.shape[0]),
            "x0": origins[:, 0].astype(int),
            "y0": origins[:, 1].astype(int),
            "psnr": maps.psnr_map.ravel(),
            "ssim": maps.ssim_map.ravel(),
        })
        csv_path = maps_dir / "quality_maps.csv"
        frame.to_csv(csv_path, index=False)
        write_pgm(maps_dir / "psnr_map.pgm", maps.psnr_map, 0.0, params.psnr_cap)
        write_pgm(maps_dir / "ssim_map.pgm", maps.ssim_map, 0.0, 1.0)
        report = report.model_copy(update={"maps": str(csv_path),
                                           "psnr_map": str(maps_dir / "psnr_map.pgm"),
                                           "ssim_map": str(maps_dir / "ssim_map.pgm")})
    _emit(report)


@main.command()
@click.argument("suite", type=click.Choice(SUITES))
@click.argument("corpus_dir", type=click.Path(file_okay=False))
@click.option("-o", "--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("-p", "--patch-size", type=int, default=params.patch_size, show_default=True)
@click.option("-s", "--stages", "n_stages", type=int, default=params.n_stages, show_default=True)
@click.option("-k", "--refine-steps", type=int, default=params.refine_steps, show_default=True)
@click.option("--train-steps", type=int, default=params.pod_steps, show_default=True)
@click.option("--fit-gaussians", type=int, default=500, show_default=True)
@click.option("--fit-iterations", type=int, default=2000, show_default=True)
@click.pass_context
def bench(ctx, suite, corpus_dir, out_dir, patch_size, n_stages, refine_steps, train_steps,
          fit_gaussians, fit_iterations):
    """Run one ablation suite over a corpus directory."""
    cfg = BenchConfig(patch_size=patch_size, n_stages=n_stages, refine_steps=refine_steps,
                      train_steps=train_steps, fit_gaussians=fit_gaussians,
                      fit_iterations=fit_iterations, seed=ctx.obj["seed"])
    _emit(run_suite(suite, load_corpus(corpus_dir), out_dir, cfg))


@main.command()
@click.argument("mode", type=click.Choice(["pod", "finetune"]))
@click.argument("corpus_dir", type=click.Path(file_okay=False))
@click.option("-c", "--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False), help="weights file")
@click.option("--log", "log_path", required=True, type=click.Path(dir_okay=False), help="training log CSV")
@click.option("--init", "init_path", type=click.Path(dir_okay=False), default=None,
              help="start from these weights (finetune after POD)")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), default=None)
@click.option("--resume", "resume_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def train(ctx, mode, corpus_dir, config_path, output, log_path, init_path, checkpoint_path, resume_path):
    """Train the tiny predictor with POD or finetune it on prefix render losses."""
    cfg = load_train_config(config_path)
    corpus = load_corpus(corpus_dir)
    control = cfg.control
    state = None
    if resume_path is not None:
        model, state, saved_mode = load_checkpoint(resume_path)
        if saved_mode != mode:
            raise click.UsageError(f"checkpoint was written by {saved_mode}, not {mode}")
    elif init_path is not None:
        model = load_weights(init_path)
    else:
        model = TinyLinearPredictor.initialize(control.patch_size, control.n_stages,
                                               named_rng(ctx.obj["seed"], "tiny-init"))
    start = state.step if state is not None else 0
    if mode == "pod":
        result = pod_train(model, corpus, cfg.pod, control, resume=state, checkpoint_path=checkpoint_path)
        steps = cfg.pod.steps
    else:
        result = finetune_train(model, corpus, cfg.finetune, control, resume=state, checkpoint_path=checkpoint_path)
        steps = cfg.finetune.steps
    save_weights(output, result.model)
    frame = result.log
    frame.to_csv(log_path, index=False)
    _emit(TrainReport(mode=mode, steps=steps, start_step=start, images=len(corpus), weights=str(output),
                      log=str(log_path), final_total=float(frame["total"].iloc[-1]) if len(frame) else None))


@main.command()
@click.argument("report", type=click.Choice(sorted(REPORTS)))
def schema(report):
    """Print the JSON schema of a report."""
    click.echo(json.dumps(REPORTS[report].model_json_schema(), indent=2, sort_keys=True))
