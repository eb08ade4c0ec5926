import numpy as np
import pytest

from src.exceptions import InputError
from src.modules.datasets import (CommunitySet, generate_sbm, load_attributes, load_communities, load_edge_list,
                                  load_ego_networks, load_linqs, write_communities, write_edge_list)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_edge_list_compacts_numeric_ids(tmp_path):
    path = write(tmp_path / "g.txt", "# comment\n10 30\n30 20\n\n20 10\n10 10\n")
    g = load_edge_list(path)
    assert g.n == 3 and g.m == 3
    assert g.node_labels == ("10", "20", "30")


def test_edge_list_reports_bad_line(tmp_path):
    path = write(tmp_path / "g.txt", "1 2\n3\n")
    with pytest.raises(InputError, match=":2:"):
        load_edge_list(path)


def test_communities_cmty_and_labels_formats(tmp_path):
    g = load_edge_list(write(tmp_path / "g.txt", "a b\nb c\nc d\n"))
    cs = load_communities(write(tmp_path / "c.txt", "a b\nc d b\n"), g)
    assert cs.communities == (frozenset({0, 1}), frozenset({1, 2, 3}))
    assert cs.of(1) == (0, 1)
    assert cs.members_of(1) == frozenset({0, 1, 2, 3})

    by_label = load_communities(write(tmp_path / "l.txt", "a x\nb y\nc x\nd y\n"), g, fmt="labels")
    assert by_label.communities == (frozenset({0, 2}), frozenset({1, 3}))


def test_communities_unknown_node(tmp_path):
    g = load_edge_list(write(tmp_path / "g.txt", "1 2\n"))
    with pytest.raises(InputError, match="not in the graph"):
        load_communities(write(tmp_path / "c.txt", "1 7\n"), g)


def test_attributes_file(tmp_path):
    g = load_edge_list(write(tmp_path / "g.txt", "1 2\n2 3\n"))
    g = load_attributes(write(tmp_path / "a.txt", "1 1 0\n3 0 1\n"), g)
    assert g.attributes.tolist() == [[1, 0], [0, 0], [0, 1]]


def test_linqs_loader_skips_unknown_citations(tmp_path):
    content = write(tmp_path / "x.content", "p1 1 0 0 ML\np2 0 1 0 DB\np3 1 1 0 ML\n")
    cites = write(tmp_path / "x.cites", "p1 p2\np3 p1\np9 p1\n")
    bundle = load_linqs(content, cites, "tiny")
    assert bundle.graph.n == 3 and bundle.graph.m == 2
    assert bundle.graph.attribute_dim == 3
    # classes sorted: DB, ML
    assert bundle.communities.communities == (frozenset({1}), frozenset({0, 2}))


def test_ego_networks_align_features_by_name(tmp_path):
    write(tmp_path / "0.edges", "1 2\n")
    write(tmp_path / "0.circles", "circle0\t1\t2\n")
    write(tmp_path / "0.feat", "1 1 0\n2 0 1\n")
    write(tmp_path / "0.egofeat", "1 1\n")
    write(tmp_path / "0.featnames", "0 gender;1\n1 school;7\n")

    write(tmp_path / "5.edges", "6 7\n")
    write(tmp_path / "5.circles", "circle0\t6\t7\ncircle1\n")
    write(tmp_path / "5.feat", "6 1\n7 0\n")
    write(tmp_path / "5.egofeat", "0\n")
    write(tmp_path / "5.featnames", "0 locale;3\n")

    bundles = load_ego_networks(tmp_path)
    assert [b.name for b in bundles] == ["0", "5"]

    first, second = bundles
    # ego is linked to every alter
    assert first.graph.m == 3
    assert first.graph.attribute_dim == second.graph.attribute_dim == 3
    # vocabulary: gender;1, locale;3, school;7
    assert first.graph.attributes.tolist() == [[1, 0, 1], [1, 0, 0], [0, 0, 1]]
    assert second.graph.attributes[1].tolist() == [0, 1, 0]
    # empty circles are dropped
    assert len(second.communities) == 1


def test_ego_network_without_circles(tmp_path):
    write(tmp_path / "3.edges", "1 2\n")
    with pytest.raises(InputError, match="circles"):
        load_ego_networks(tmp_path)


def test_non_integer_attribute_reports_its_line(tmp_path):
    g = load_edge_list(write(tmp_path / "g.txt", "1 2\n2 3\n"))
    with pytest.raises(InputError, match=r"a.txt:2: expected integer"):
        load_attributes(write(tmp_path / "a.txt", "1 1 0\n2 x 1\n"), g)


def test_malformed_linqs_content_reports_its_line(tmp_path):
    cites = write(tmp_path / "x.cites", "p1 p2\n")
    bad_flag = write(tmp_path / "x.content", "p1 1 0 ML\np2 0 y DB\n")
    with pytest.raises(InputError, match=r"x.content:2: expected integer"):
        load_linqs(bad_flag, cites)
    ragged = write(tmp_path / "r.content", "p1 1 0 ML\np2 1 DB\n")
    with pytest.raises(InputError, match=r"r.content:2: expected 2 word flags"):
        load_linqs(ragged, cites)


def test_malformed_ego_files_report_their_line(tmp_path):
    write(tmp_path / "0.edges", "1 2\n")
    write(tmp_path / "0.circles", "circle0\t1\t2\n")
    write(tmp_path / "0.feat", "1 1 0\n2 0 ?\n")
    with pytest.raises(InputError, match=r"0.feat:2: expected integer"):
        load_ego_networks(tmp_path)

    write(tmp_path / "0.feat", "1 1 0\n")
    write(tmp_path / "0.edges", "1 2\n3\n")
    with pytest.raises(InputError, match=r"0.edges:2: expected two node ids"):
        load_ego_networks(tmp_path)


def test_empty_ego_directory(tmp_path):
    assert load_ego_networks(tmp_path) == []


def test_sbm_blocks_are_communities():
    bundle = generate_sbm([30, 20], 0.5, 0.01, rng_seed=3)
    assert bundle.graph.n == 50
    assert [len(c) for c in bundle.communities.communities] == [30, 20]
    again = generate_sbm([30, 20], 0.5, 0.01, rng_seed=3)
    assert bundle.graph.edges == again.graph.edges


def test_sbm_rejects_bad_probabilities():
    with pytest.raises(InputError):
        generate_sbm([10, 10], 1.5, 0.0)


def test_written_files_load_back(tmp_path):
    bundle = generate_sbm([15, 15], 0.6, 0.05, rng_seed=1)
    write_edge_list(tmp_path / "g.txt", bundle.graph)
    write_communities(tmp_path / "c.txt", bundle.communities, bundle.graph)

    g = load_edge_list(tmp_path / "g.txt")
    cs = load_communities(tmp_path / "c.txt", g)
    assert g.m == bundle.graph.m
    assert sorted(len(c) for c in cs.communities) == [15, 15]


def test_community_members_must_be_nodes():
    with pytest.raises(InputError):
        CommunitySet.from_communities([[0, 4]], 3)
    cs = CommunitySet.from_communities([[], [0, 1]], 3)
    assert len(cs) == 1 and cs.of(2) == ()
    assert np.array_equal(sorted(cs.members_of(0)), [0, 1])
