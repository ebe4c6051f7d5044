import pytest

from structdm.ontology import default_ontology, generate_database


@pytest.fixture(scope="session")
def ont():
    return default_ontology()


@pytest.fixture(scope="session")
def db(ont):
    return generate_database(ont, 7, 50)


@pytest.fixture(scope="session")
def small_db(ont):
    return generate_database(ont, 0, 30)
