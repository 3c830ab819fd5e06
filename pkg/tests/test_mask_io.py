import numpy as np
import pytest

from scripts.errors import ContractError
from scripts.mask_io import load_masks, save_masks, support_hash


def test_masks_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    masks = [(rng.random((7, 3)) < 0.4).astype(np.float64), (rng.random((2, 3, 3, 3)) < 0.2).astype(np.float64)]
    path = save_masks(str(tmp_path / 'masks' / 'step_0000000.sevm'), masks, ['G.0.dense', 'G.1.conv2d'])

    loaded, header = load_masks(path)
    assert [layer['name'] for layer in header] == ['G.0.dense', 'G.1.conv2d']
    assert header[0]['nonzero'] == int(masks[0].sum())
    for original, restored in zip(masks, loaded):
        assert restored.shape == original.shape
        np.testing.assert_array_equal(restored, original)


def test_rejects_foreign_file(tmp_path):
    path = tmp_path / 'bogus.sevm'
    path.write_bytes(b'NOPE' + bytes(16))
    with pytest.raises(ContractError):
        load_masks(str(path))


def test_support_hash_tracks_support_only():
    mask = np.array([1.0, 0.0, 1.0, 1.0])
    assert support_hash(mask) == support_hash(mask.copy())
    assert support_hash(mask) != support_hash(np.array([1.0, 1.0, 0.0, 1.0]))
    assert len(support_hash(mask)) == 16
