"""
Estimation pipeline components: model, sampler, SAEM engine, likelihood, inference and simulation study.
"""
