import narwhals as nw

OBSERVATION_INPUT_SCHEMA = nw.Schema(
    {
        "t_k": nw.Float64(),
        "y_k": nw.Float64(),
    }
)

SIMULATED_OBSERVATIONS_SCHEMA = nw.Schema(
    {
        "t_k": nw.Float64(),
        "y_k": nw.Float64(),
        "x_k": nw.Float64(),
    }
)

SURVIVAL_CURVE_SCHEMA = nw.Schema(
    {
        "t_n": nw.Float64(),
        "survival_prob": nw.Float64(),
        "hitting_cdf": nw.Float64(),
        "std_err": nw.Float64(),
    }
)

VALIDATION_SCHEMA = nw.Schema(
    {
        "t_n": nw.Float64(),
        "filter": nw.Float64(),
        "oracle": nw.Float64(),
        "oracle_std_err": nw.Float64(),
        "abs_diff": nw.Float64(),
    }
)
