import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pydime import metrics
from pydime.errors import ArgumentError, DegenerateInputError
from pydime.image import tiles, to_model_range, to_pixel_range

images = arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1))

@given(images, images)
@settings(max_examples=50, deadline=None)
def test_l2_normalized_properties(a, b):
    d = metrics.l2_normalized(a, b)

    assert 0<=d<=1
    assert d==pytest.approx(metrics.l2_normalized(b, a))
    assert metrics.l2_normalized(a, a)==0

@given(images, images)
@settings(max_examples=50, deadline=None)
def test_tiled_l2_bounds_l2(a, b):
    assert metrics.tiled_l2(a, b, (2, 2))>=metrics.l2_normalized(a, b) - 1e-12

def test_l2_normalized_value():
    a = np.zeros((2, 2, 1))
    b = np.ones((2, 2, 1))
    b[0, 0] = 0

    assert metrics.l2_normalized(a, b)==pytest.approx(np.sqrt(3/4))

def test_l2_normalized_shape_mismatch():
    with pytest.raises(ArgumentError):
        metrics.l2_normalized(np.zeros((2, 2, 1)), np.zeros((2, 2, 3)))

def test_tiled_l2_finds_local_difference():
    a = np.zeros((4, 4, 1))
    b = a.copy()
    b[:2, :2] = 1

    assert metrics.tiled_l2(a, b, (2, 2))==pytest.approx(1.)
    assert metrics.l2_normalized(a, b)==pytest.approx(0.5)

def test_tiled_l2_grid_must_divide():
    with pytest.raises(ArgumentError):
        metrics.tiled_l2(np.zeros((4, 4, 1)), np.zeros((4, 4, 1)), (3, 3))

def test_matrices_match_scalar_functions(rng):
    a = rng.random((5, 4, 4, 3))
    b = rng.random((3, 4, 4, 3))
    l2 = metrics.pairwise_l2(a, b)
    tiled = metrics.tiled_l2_matrix(a, (2, 2), b)

    for i in range(5):
        for j in range(3):
            assert l2[i, j]==pytest.approx(metrics.l2_normalized(a[i], b[j]))
            assert tiled[i, j]==pytest.approx(metrics.tiled_l2(a[i], b[j], (2, 2)))

def test_tiles_layout():
    x = np.arange(16.).reshape(4, 4, 1)
    t = tiles(x, (2, 2))

    assert t.shape==(4, 4)
    np.testing.assert_array_equal(t[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(t[3], [10, 11, 14, 15])

def test_pixel_range_round_trip(rng):
    x = rng.random((3, 3, 3))

    np.testing.assert_allclose(to_pixel_range(to_model_range(x)), x)
    assert to_pixel_range(np.array([2., -3.])).tolist()==[1., 0.]

def test_relative_distance():
    xhat = np.zeros((2, 2, 1))
    x = np.full((2, 2, 1), 0.1)
    neighbors = metrics.NeighborSet(None, np.array([0, 1]), np.array([0.1, 0.3]))

    assert metrics.relative_distance(xhat, x, neighbors, alpha=0.5)==pytest.approx(1.)

def test_relative_distance_degenerate():
    x = np.zeros((2, 2, 1))
    with pytest.raises(DegenerateInputError):
        metrics.relative_distance(x, x, metrics.NeighborSet(None, np.array([0]), np.array([0.])))
    with pytest.raises(DegenerateInputError):
        metrics.relative_distance(x, x, metrics.NeighborSet(None, np.array([], dtype=int),
                                                             np.array([])))
    with pytest.raises(ArgumentError):
        metrics.relative_distance(x, x, metrics.NeighborSet(None, np.array([0]), np.array([1.])),
                                  alpha=0)

def test_embedding_is_unit_norm(rng):
    emb = metrics.embed(rng.random((16, 16, 3)))

    assert emb.dim==64
    assert np.linalg.norm(emb.vec)==pytest.approx(1.)
    assert emb.vec.sum()==pytest.approx(0., abs=1e-9)
    assert not emb.constant

def test_constant_image_embedding():
    emb = metrics.embed(np.full((16, 16, 3), 0.3))

    assert emb.constant
    assert np.all(emb.vec==0)

def test_embedding_ignores_brightness_and_contrast(rng):
    x = rng.random((16, 16, 3))*0.5

    sim = metrics.cosine_similarity(metrics.embed(x), metrics.embed(0.2 + 1.5*x))
    assert sim==pytest.approx(1.)

def test_embedding_of_non_divisible_image(rng):
    emb = metrics.embed(rng.random((10, 10, 3)))

    assert emb.dim==64

def test_cosine_similarity_errors():
    with pytest.raises(DegenerateInputError):
        metrics.cosine_similarity(np.zeros(3), np.ones(3))
    with pytest.raises(ArgumentError):
        metrics.cosine_similarity(np.ones(3), np.ones(4))

def test_nearest_neighbors_order_and_ties():
    corpus = np.array([[0.], [1.], [1.], [0.5], [3.]])
    result = metrics.nearest_neighbors(np.array([1.]), corpus, 3)

    assert result.ids.tolist()==[1, 2, 3]
    np.testing.assert_allclose(result.distances, [0, 0, 0.5])

def test_nearest_neighbors_exclude():
    corpus = np.array([[0.], [1.], [2.]])
    result = metrics.nearest_neighbors(corpus[1], corpus, 2, exclude=1, query_id=1)

    assert result.query==1
    assert result.ids.tolist()==[0, 2]
    with pytest.raises(ArgumentError):
        metrics.nearest_neighbors(corpus[1], corpus, 3, exclude=1)

def test_nearest_neighbors_errors():
    with pytest.raises(ArgumentError):
        metrics.nearest_neighbors(np.zeros(2), np.zeros((0, 2)), 1)
    with pytest.raises(ArgumentError):
        metrics.nearest_neighbors(np.zeros(2), np.zeros((3, 2)), 1, metric='l1')
    with pytest.raises(ArgumentError):
        metrics.nearest_neighbors(np.zeros(3), np.zeros((3, 2)), 1)

def test_parallel_scan_matches_serial(rng):
    corpus = rng.random((300, 12))
    query = rng.random(12)

    serial = metrics.nearest_neighbors(query, corpus, 10)
    parallel = metrics.nearest_neighbors(query, corpus, 10, num_threads=4, chunk_size=32)
    np.testing.assert_array_equal(serial.ids, parallel.ids)
    np.testing.assert_array_equal(serial.distances, parallel.distances)

def test_cosine_neighbors_with_zero_vector():
    corpus = np.array([[1., 0.], [0., 0.], [0., 1.]])
    result = metrics.nearest_neighbors(np.array([1., 0.]), corpus, 3, metric='cosine')

    assert result.ids.tolist()==[0, 1, 2]
    np.testing.assert_allclose(result.distances, [0, 1, 1])

def test_outlier_score():
    corpus = np.array([[1., 0.], [1., 0.], [0., 1.]])

    assert metrics.outlier_score(corpus[2], corpus, 2, exclude=2)==pytest.approx(1.)
    assert metrics.outlier_score(corpus[0], corpus, 1, exclude=0)==pytest.approx(0.)
    with pytest.raises(DegenerateInputError):
        metrics.outlier_score(corpus[0], corpus, 0)

def test_write_distance_table(tmp_path):
    path = tmp_path/'dist.csv'
    metrics.write_distance_table(path, np.array([[0., 0.5], [0.5, 0.]]), row_ids=[3, 7],
                                 col_ids=[3, 7])
    lines = path.read_text().splitlines()

    assert lines[0].startswith('# format_version')
    assert lines[1]=='id,3,7'
    assert lines[2].startswith('3,')

levels = arrays(np.float64, (4, 4, 3), elements=st.sampled_from(np.linspace(0, 1, 11)))

def _checkerboard(size, cell):

    rows, cols = np.indices((size, size))
    board = ((rows//cell + cols//cell) % 2).astype(np.float64)

    return np.repeat(board[..., None], 3, axis=-1)

@given(images, images, images)
@settings(max_examples=50, deadline=None)
def test_l2_normalized_triangle_inequality(a, b, c):
    assert metrics.l2_normalized(a, c)<=metrics.l2_normalized(a, b) + metrics.l2_normalized(b, c) + 1e-12

@given(images, images)
@settings(max_examples=50, deadline=None)
def test_single_tile_is_l2(a, b):
    assert metrics.tiled_l2(a, b, (1, 1))==pytest.approx(metrics.l2_normalized(a, b), rel=1e-12, abs=1e-15)

@given(levels, levels)
@settings(max_examples=50, deadline=None)
def test_tiled_l2_is_zero_only_for_identical_images(a, b):
    assert metrics.tiled_l2(a, a, (2, 2))==0
    assert (metrics.tiled_l2(a, b, (2, 2))==0)==np.array_equal(a, b)

@given(images, images)
@settings(max_examples=50, deadline=None)
def test_tiled_l2_is_worst_tile(a, b):
    per_tile = [metrics.l2_normalized(a[r:r+2, c:c+2], b[r:r+2, c:c+2])
                for r in (0, 2) for c in (0, 2)]

    assert metrics.tiled_l2(a, b, (2, 2))==pytest.approx(max(per_tile))

def test_l2_normalized_half_differing_values():
    a = np.array([0., 0., 1., 1.]).reshape(2, 2, 1)
    b = np.array([1., 0., 1., 0.]).reshape(2, 2, 1)

    assert metrics.l2_normalized(a, b)==pytest.approx(0.70711, abs=1e-5)
    assert metrics.l2_normalized(np.zeros((2, 2, 1)), np.ones((2, 2, 1)))==1

def test_relative_distance_at_neighbor_scale():
    neighbors = metrics.NeighborSet(None, np.arange(5), np.full(5, 0.2))

    assert metrics.relative_distance(np.zeros((2, 2, 1)), np.full((2, 2, 1), 0.2),
                                     neighbors)==pytest.approx(2.)

@given(st.data(), st.lists(st.floats(0.01, 1), min_size=1, max_size=10))
@settings(max_examples=50, deadline=None)
def test_relative_distance_ignores_neighbor_order(data, distances):
    xhat = np.zeros((2, 2, 1))
    x = np.full((2, 2, 1), 0.3)
    shuffled = data.draw(st.permutations(distances))
    ids = np.arange(len(distances))
    before = metrics.relative_distance(xhat, x, metrics.NeighborSet(None, ids, np.array(distances)))
    after = metrics.relative_distance(xhat, x, metrics.NeighborSet(None, ids[::-1], np.array(shuffled)))

    assert after==pytest.approx(before, rel=1e-12)

def test_planted_near_duplicate_scores_lowest(rng):
    train = rng.random((30, 4, 4, 3))
    planted = np.clip(train[7] + rng.normal(0, 0.01, train[7].shape), 0, 1)
    generations = np.concatenate([planted[None], rng.random((5, 4, 4, 3))])

    scores = {}
    for g, xhat in enumerate(generations):
        neighbors = metrics.nearest_neighbors(xhat, train, 10)
        for i, x in enumerate(train):
            scores[g, i] = metrics.relative_distance(xhat, x, neighbors)
    planted_score = scores.pop((0, 7))

    assert planted_score<min(scores.values())

@given(arrays(np.float64, (16, 16, 3), elements=st.sampled_from(np.linspace(0, 1, 11))))
@settings(max_examples=50, deadline=None)
def test_embedding_follows_horizontal_flip(x):
    emb = metrics.embed(x)
    flipped = metrics.embed(x[:, ::-1])

    assert flipped.constant==emb.constant
    np.testing.assert_allclose(flipped.vec.reshape(8, 8), emb.vec.reshape(8, 8)[:, ::-1], atol=1e-9)

def test_inverted_checkerboard_is_opposite():
    board = _checkerboard(16, 2)

    assert metrics.cosine_similarity(metrics.embed(board), metrics.embed(1 - board))==pytest.approx(-1.)

def test_checkerboard_finer_than_grid_is_constant():
    emb = metrics.embed(_checkerboard(16, 1))

    assert emb.constant
    assert not emb.vec.any()
    with pytest.raises(DegenerateInputError):
        metrics.cosine_similarity(emb, emb)
