"""Per-image optimization from scratch, the quality reference the stage-wise
encoder is compared against.

python -m scripts.reference_fit image.png -o fit.png --curve fit.csv
python -m scripts.reference_fit --corpus
"""
import click
import numpy as np

from gsir import params
from gsir.corpus import natural_corpus
from gsir.imageio import read_image, write_png
from gsir.metrics import ms_ssim, psnr
from gsir.optim import fit_from_scratch, write_loss_curve
from gsir.render import render


def _fit(target, n_gaussians, iterations, seed):
    result = fit_from_scratch(target, n_gaussians, iterations, seed=seed)
    return result, render(result.gaussians, target.shape[1], target.shape[0])


@click.command()
@click.argument("image", type=click.Path(dir_okay=False), required=False)
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None)
@click.option("--curve", type=click.Path(dir_okay=False), default=None)
@click.option("--corpus", is_flag=True, help="fit every benchmark crop and print the mean PSNR")
@click.option("-n", "--n-gaussians", type=int, default=500, show_default=True)
@click.option("--iterations", type=int, default=2000, show_default=True)
@click.option("--seed", type=int, default=params.default_seed, show_default=True)
def main(image, output, curve, corpus, n_gaussians, iterations, seed):
    if corpus:
        scores = [psnr(_fit(t, n_gaussians, iterations, seed)[1], t) for t in natural_corpus()]
        print(f"{n_gaussians=} {iterations=} psnr={[round(s, 2) for s in scores]} mean={np.mean(scores):.2f}")
        return
    if image is None or output is None:
        raise click.UsageError("IMAGE and --output are required unless --corpus is given")
    target = read_image(image)
    result, recon = _fit(target, n_gaussians, iterations, seed)
    write_png(output, recon)
    if curve is not None:
        write_loss_curve(curve, result.curve)
    print(f"{n_gaussians=} {iterations=} psnr={psnr(recon, target):.2f} ms_ssim={ms_ssim(recon, target):.4f}")


if __name__ == "__main__":
    main()
