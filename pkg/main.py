import sys

from patchzero_lab import run_command


def main():
    # e.g. `python main.py gen-data --seed 7 --out runs/demo`
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
