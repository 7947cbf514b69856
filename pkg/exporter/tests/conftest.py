import pytest

from dasr_exporter.export import export


@pytest.fixture(scope="session")
def resnet_export(tmp_path_factory):
    out = tmp_path_factory.mktemp("resnet50")
    return export("resnet50", out, seed=0)


@pytest.fixture(scope="session")
def vgg_export(tmp_path_factory):
    out = tmp_path_factory.mktemp("vgg16")
    return export("vgg16", out, seed=0)
