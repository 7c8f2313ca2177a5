pytest_plugins = ("fixtures.docnav_fixtures",)
