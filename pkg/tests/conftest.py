from hypothesis import HealthCheck, settings

settings.register_profile(
    "flowkd",
    max_examples=200,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("flowkd")
