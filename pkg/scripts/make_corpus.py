"""Writes the two benchmark corpora: natural-looking 64x64 crops and
two-Gaussian 16x16 toy scenes for predictor training.

python -m scripts.make_corpus data/
"""
from pathlib import Path

import click

from gsir import params
from gsir.corpus import CROP_SIZE, N_CROPS, TOY_SIZE, natural_corpus, toy_corpus, write_corpus


@click.command()
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--crops", type=int, default=N_CROPS, show_default=True)
@click.option("--toys", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=params.default_seed, show_default=True)
def main(out_dir, crops, toys, seed):
    out_dir = Path(out_dir)
    natural = write_corpus(out_dir / "natural", natural_corpus(crops, CROP_SIZE, seed), prefix="crop")
    toy = write_corpus(out_dir / "toy", toy_corpus(toys, TOY_SIZE, seed), prefix="toy")
    print(f"{len(natural)} crops -> {out_dir / 'natural'}")
    print(f"{len(toy)} toy scenes -> {out_dir / 'toy'}")


if __name__ == "__main__":
    main()
