import numpy as np

from fusenet.layers import MLP
from fusenet.models import CentralNet


def copy_of_central(model: CentralNet) -> MLP:
    """A stand-alone MLP carrying the central network's weights and statistics."""
    s = model.spec
    ref = MLP(s.aligned_width, s.hidden, s.n_classes, np.random.default_rng(12345), batch_norm=s.batch_norm,
              bn_momentum=s.bn_momentum, bn_epsilon=s.bn_epsilon)
    state = {k[len("central."):]: v for k, v in model.state_dict().items() if k.startswith("central.")}
    ref.load_state_dict(state)
    return ref


def early_pattern(model: CentralNet, input_weights) -> None:
    """Central weight 1 everywhere, modality weights 0 after layer 0."""
    n = len(model.spec.widths)
    model.alphas.set(0, modality=input_weights)
    for i in range(1, len(model.alphas.layers)):
        model.alphas.set(i, central=1.0, modality=[0.0] * n)


def late_pattern(model: CentralNet, output_weights) -> None:
    """Every fusion before the output sees nothing from the modalities; the output ignores the central head."""
    n = len(model.spec.widths)
    model.alphas.set(0, modality=[0.0] * n)
    last = len(model.alphas.layers) - 1
    for i in range(1, last):
        model.alphas.set(i, modality=[0.0] * n)
    model.alphas.set(last, central=0.0, modality=output_weights)
    for name, p in model.central.named_parameters():
        if name.endswith(".b"):
            p.values[...] = 0.0


def random_batch(rng, widths, rows=7):
    return [rng.standard_normal((rows, w)) for w in widths]


def count_macro(pred, true, n_classes):
    total = 0.0
    for c in range(n_classes):
        hits = seen = 0
        for p, t in zip(pred, true):
            if t == c:
                seen += 1
                hits += p == c
        total += hits / seen
    return total / n_classes


def count_f1(scores, truth, threshold):
    tp = fp = fn = 0
    for i in range(scores.shape[0]):
        for j in range(scores.shape[1]):
            p, t = scores[i, j] >= threshold, truth[i, j] == 1
            tp += p and t
            fp += p and not t
            fn += t and not p
    return 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
