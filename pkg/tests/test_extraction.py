import itertools

import networkx as nx
import numpy as np
import pytest

from pydime import extraction
from pydime.dataset import Dataset, make_toy_dataset
from pydime.diffusion import Architecture, build_model
from pydime.errors import ArgumentError, ConfigurationError, DegenerateInputError

def _brute_force_clique(graph):
    for size in range(graph.number_of_nodes(), 0, -1):
        for nodes in itertools.combinations(sorted(graph.nodes), size):
            if all(graph.has_edge(a, b) for a, b in itertools.combinations(nodes, 2)):
                return list(nodes)
    return []

@pytest.fixture
def train(rng):
    return Dataset(rng.random((20, 8, 8, 3)))

def test_largest_clique_matches_brute_force():
    rng = np.random.default_rng(0)
    for instance in range(200):
        num_nodes = int(rng.integers(1, 13))
        graph = nx.gnp_random_graph(num_nodes, rng.uniform(0.1, 0.9), seed=instance)

        clique = extraction.largest_clique(graph)
        assert clique.nodes==_brute_force_clique(graph)
        assert not clique.approximate

def test_largest_clique_of_empty_graph():
    assert len(extraction.largest_clique(nx.Graph()))==0

def test_greedy_clique_is_a_clique():
    graph = nx.gnp_random_graph(30, 0.5, seed=1)
    clique = extraction.largest_clique(graph, exact_limit=10)

    assert clique.approximate
    assert all(graph.has_edge(a, b) for a, b in itertools.combinations(clique.nodes, 2))
    assert clique.nodes==sorted(clique.nodes)

def test_similarity_graph(rng):
    images = rng.random((6, 8, 8, 1))
    images[3] = images[0]
    graph = extraction.build_similarity_graph(images, 0.01)

    assert graph.number_of_nodes()==6
    assert list(graph.edges)==[(0, 3)]
    assert graph.edges[0, 3]['distance']==0
    assert graph.graph['grid']==(2, 2)
    with pytest.raises(ArgumentError):
        extraction.build_similarity_graph(images, 0.)

def test_flag_memorized(rng):
    images = rng.random((20, 8, 8, 1))
    images[:12] = images[0]
    flag = extraction.flag_memorized(images, 0.01, clique_min=10)

    assert flag is not None
    assert flag.clique.nodes==list(range(12))
    assert flag.representative==0
    assert flag.mean_distance==0
    np.testing.assert_array_equal(flag.image, images[0])

def test_no_flag_for_diverse_batch(rng):
    images = rng.random((20, 8, 8, 1))

    assert extraction.flag_memorized(images, 0.01, clique_min=10) is None
    with pytest.raises(ArgumentError):
        extraction.flag_memorized(images, 0.01, clique_min=1)

def test_calibrate_edge_threshold(rng):
    images = rng.random((10, 8, 8, 1))
    threshold = extraction.calibrate_edge_threshold(images, quantile=0.)
    dist = extraction.tiled_l2_matrix(images, (2, 2))

    assert threshold==pytest.approx(dist[np.triu_indices(10, k=1)].min())
    with pytest.raises(DegenerateInputError):
        extraction.calibrate_edge_threshold(images[:1])

def test_generation_batch_checks_seeds():
    with pytest.raises(ArgumentError):
        extraction.GenerationBatch(np.zeros((2, 4, 4, 1)), [1, 1])
    with pytest.raises(ArgumentError):
        extraction.GenerationBatch(np.zeros((2, 4, 4, 1)), [1])

def test_generate_batch(small_model, schedule):
    batch = extraction.generate_batch(small_model, schedule, seed=3, count=3, model_id='m')

    assert len(batch)==3
    assert len(set(batch.seeds.tolist()))==3
    assert batch.model_id=='m'

def test_match_to_training(train):
    assert extraction.match_to_training(train.images[4], train)==(4, 0.)
    assert extraction.match_to_training(np.zeros((8, 8, 3)), train) is None
    with pytest.raises(ArgumentError):
        extraction.match_to_training(train.images[4], train, delta=1.)

def test_eidetic_count(train):
    images = np.concatenate((train.images, train.images[[2, 2]]))
    data = Dataset(images)

    assert extraction.eidetic_count(train.images[2], data)==3
    assert extraction.eidetic_count(train.images[5], data)==1
    assert extraction.eidetic_count(train.images[5], Dataset(np.zeros((0, 8, 8, 3))))==0

def test_score_generations(train):
    generations = np.stack([train.images[3], np.zeros((8, 8, 3))])
    records = extraction.score_generations(generations, train, n=5)

    assert [rec.generation_id for rec in records]==[0, 1]
    assert records[0].train_id==3
    assert records[0].distance==0 and records[0].score==0
    assert records[0].extracted
    assert records[0].eidetic_k==1 and records[0].group_id==3
    assert not records[1].extracted
    assert records[1].score>0

def test_score_cutoff_restricts_verdicts(train):
    near = np.clip(train.images[3] + 0.05, 0, 1)
    records = extraction.score_generations(near[None], train, n=5, score_cutoff=1e-6)

    assert records[0].distance<=0.15
    assert not records[0].extracted

def test_undefined_score_is_infinite():
    train = Dataset(np.zeros((3, 4, 4, 1)))
    records = extraction.score_generations(np.zeros((1, 4, 4, 1)), train, n=2)

    assert records[0].score==np.inf
    assert records[0].error is not None
    assert records[0].extracted

def test_scan_counts_duplicated_images_once(train):
    images = np.concatenate((train.images, train.images[[3]]))
    data = Dataset(images)
    batches = [np.stack([data.images[20], data.images[3]]), data.images[[7]]]

    extracted = extraction.untargeted_extraction_scan(batches, data, n=5)

    assert sorted(rec.group_id for rec in extracted)==[3, 7]
    assert all(rec.score==0 for rec in extracted)
    record_3 = next(rec for rec in extracted if rec.group_id==3)
    assert record_3.generation_id==0 and record_3.eidetic_k==2

def test_records_table(train):
    records = extraction.score_generations(train.images[:2], train, n=3)
    table = extraction.records_table(records)

    assert len(table)==2
    assert table['verdict'].tolist()==['extracted', 'extracted']
    assert 'clique_size' in table.columns

def test_precision_recall():
    table = extraction.precision_recall([0.1, 0.5, 0.3], [True, False, True])

    assert table['rank'].tolist()==[1, 2, 3]
    np.testing.assert_allclose(table['precision'], [1, 1, 2/3])
    assert table['extracted_count'].tolist()==[1, 2, 2]
    with pytest.raises(DegenerateInputError):
        extraction.precision_recall([0.1], [False])
    with pytest.raises(ArgumentError):
        extraction.precision_recall([0.1, 0.2], [True])

def test_calibrate_score_cutoff():
    assert extraction.calibrate_score_cutoff([0.8, np.inf, 0.5, 1.2])==0.5
    with pytest.raises(DegenerateInputError):
        extraction.calibrate_score_cutoff([np.inf])

def test_rank_outliers(rng):
    base = rng.random((8, 8, 3))*0.9
    images = np.stack([base + 0.01*rng.random((8, 8, 3)) for _ in range(9)] + [rng.random((8, 8, 3))])

    ids, scores = extraction.rank_outliers(Dataset(images), k=50)

    assert ids[0]==9
    assert np.all(np.diff(scores)<=0)
    assert sorted(ids.tolist())==list(range(10))

def test_targeted_extraction(schedule, rng):
    data = Dataset(rng.random((6, 4, 4, 1)), labels=[0, 1, 0, 1, 0, 1])
    arch = Architecture(hidden=(16,), time_dim=4, conditioning='class', num_classes=2)
    model = build_model(arch, (4, 4, 1), schedule)

    table = extraction.targeted_outlier_extraction(model, schedule, data, top=2, per_target=2, k=3)

    assert len(table)==2
    assert list(table.columns)==['train_id', 'outlier_score', 'label', 'min_distance', 'extracted']
    assert table['label'].tolist()==[data.label_of(idx) for idx in table['train_id']]

def test_targeted_extraction_needs_conditional_model(small_model, schedule, rng):
    data = Dataset(rng.random((6, 4, 4, 1)), labels=[0]*6)

    with pytest.raises(ConfigurationError):
        extraction.targeted_outlier_extraction(small_model, schedule, data)

def test_extraction_frequency_by_duplication():
    data = make_toy_dataset(20, (8, 8, 3), duplicates={0: 4, 1: 2}, num_classes=0)
    generations = np.stack([data.images[0]]*3 + [data.images[1], np.zeros((8, 8, 3))])

    table = extraction.extraction_frequency_by_duplication(
        generations, data, data.provenance['duplicate_groups'])

    assert table['planted_id'].tolist()==[1, 0]
    assert table['duplicate_count'].tolist()==[2, 4]
    assert table['matches'].tolist()==[1, 3]

def test_empty_generations_are_rejected(train):
    with pytest.raises(ArgumentError):
        extraction.score_generations([], train, n=5)
    with pytest.raises(ArgumentError):
        extraction.score_generations(np.zeros((0, 8, 8, 3)), train, n=5)
    with pytest.raises(ArgumentError):
        extraction.extraction_frequency_by_duplication([], train, {0: [0]})
