"""Export the mlxtend MNIST sample as an IDX directory usable with --dataset-kind idx.

    python scripts/prepare_mnist.py data/mnist-sample
"""

import argparse

from dpltm.data_io import export_mnist_sample


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out", help="directory to write train-images/train-labels IDX files into")
    root = export_mnist_sample(p.parse_args().out)
    print(f"wrote {root}/train-images-idx3-ubyte and {root}/train-labels-idx1-ubyte")


if __name__ == "__main__":
    main()
