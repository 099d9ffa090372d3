"""Train a multi-branch mini model briefly, fold it, and compare outputs, size and speed.

Run with ``python3 demos/fold_walkthrough.py`` (a couple of minutes on one core).
"""
import numpy as np

from ghostnetv3.ghostnet import build_model, count_flops, count_params, fold_model, mini_spec
from ghostnetv3.harness.bench import time_model
from ghostnetv3.harness.commands import relative_error, synth_dataset
from ghostnetv3.training import AugmentConfig, Recipe, ScheduleConfig, train_loop
from ghostnetv3.training.loop import evaluate


def main():
    data = synth_dataset(3500, seed=0)
    train = data.subset(slice(0, 3000)).to_imageset()
    val = data.subset(slice(3000, None)).to_imageset()

    model = build_model(mini_spec(rep_branches=3, rep_1x1=True), seed=0)
    recipe = Recipe(schedule=ScheduleConfig(lr_max=0.03), augment=AugmentConfig(), ema_decay=0.99, epochs=5)
    state = train_loop(model, train, val, recipe)
    for row in state.metrics:
        print(f"epoch {row['epoch']}: loss {row['train_loss']:.3f}  val top-1 {row['val_top1_raw']:.1f}%")

    folded = fold_model(model)
    x = val.normalize(val.x[:64])
    print(f"\nlogit relative error after folding: {relative_error(folded.forward(x), model.forward(x)):.2e}")
    print(f"folded top-1 {evaluate(folded, val):.1f}%")
    for name, m in (("multi-branch", model), ("folded", folded)):
        r = time_model(m, (1, 3, 32, 32), runs=30)
        print(f"{name:>12}: {count_params(m):>7} params  {count_flops(m, (1, 3, 32, 32)):>9} MACs  "
              f"{r.median:.2f} ms median")

    single = build_model(mini_spec(rep_branches=1, rep_1x1=False), folded=True)
    print(f"\nfolded size equals a single-branch model: {count_params(single) == count_params(folded)}")


if __name__ == "__main__":
    np.set_printoptions(precision=3)
    main()
