# %% [markdown]
# # Command line
#
# `mehpan` (or `python3 -m mehpan`) wraps the library. Here it is driven
# in-process through `main`, in a scratch directory.

# %%
import tempfile
from pathlib import Path

from mehpan.cli import main

work = Path(tempfile.mkdtemp())

# %%
main(["generate", "--n", "600", "--seed", "7", "--out", str(work / "p.jsonl")])

# %%
main(["train", "--data", str(work / "p.jsonl"), "--out", str(work / "m.ckpt"),
      "--arch", "conv", "--epochs", "3", "--lr", "3e-3"])
sorted(p.name for p in work.iterdir())

# %%
main(["predict", "--data", str(work / "p.jsonl"), "--checkpoint", str(work / "m.ckpt"),
      "--out", str(work / "scores.jsonl")])
print((work / "scores.jsonl").read_text().splitlines()[0])

# %% [markdown]
# A config file sets defaults per command. Flags still win.

# %%
(work / "run.ini").write_text("[common]\nseed = 3\n\n[eval]\nepochs = 2\nsplits = 2\nlr = 0.003\n")
main(["eval", "--config", str(work / "run.ini"), "--data", str(work / "p.jsonl"),
      "--model", "rnn,conv:wsum", "--out", str(work / "report")])
