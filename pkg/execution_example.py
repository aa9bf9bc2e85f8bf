import tempfile
from pathlib import Path

from btdnet.data import Manifest, ScanDataset, preprocess_dataset
from btdnet.evaluation import aggregate_folds, evaluate_fold
from btdnet.network import restore_model
from btdnet.support import load_config
from btdnet.synth import SynthConfig, generate_synthetic
from btdnet.training import Trainer


config = load_config("test/config.json", {"train.epochs_phase1": 2, "train.epochs_phase2": 2})
workdir = Path(tempfile.mkdtemp())
generate_synthetic(SynthConfig.from_config(config), workdir / "data")
prepared = preprocess_dataset(Manifest.load(workdir / "data"), size=config["data"]["size"])
trainer = Trainer(config, prepared, workdir / "runs")
trainer.cross_validate()

scores = list()
for fold in range(trainer.split.k):
    model = restore_model(trainer.checkpoint_path(fold, 2))
    scans = ScanDataset(prepared, trainer.split.val_ids(fold), model.config.lengths)
    scores.append(evaluate_fold(model, scans, use_tta=True, tta_seed=config["augment"]["tta_seed"]).macro_f1)
print(aggregate_folds(scores))
