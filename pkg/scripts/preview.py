"""Write augmentation previews (inputs, intermediate images, G/D heatmaps).

Train a model first and pass its checkpoint for meaningful sensitivity maps:

    dgap train --out runs/t
    python3 scripts/preview.py --checkpoint runs/t/model.ckpt --out runs/preview
"""
import sys

from dgap import cli

if __name__ == "__main__":
    sys.exit(cli.main(["preview", *sys.argv[1:]]))
