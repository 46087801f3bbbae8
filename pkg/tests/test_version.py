import hitting_filter


def test_get_version():
    assert isinstance(hitting_filter.__version__, str)
