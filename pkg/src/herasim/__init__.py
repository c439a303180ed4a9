"""Discrete-event simulator and experiment harness for QoS-aware co-location
of recommendation inference models on multi-tenant CPU servers.

The package is organized along the pipeline the tooling follows in practice:

* :mod:`herasim.workload` - model zoo, arrival processes, batch sizes, load schedules
* :mod:`herasim.perfmodel` - parametric node performance model (cores, LLC ways, DRAM bandwidth)
* :mod:`herasim.simcore` - event engine, latency percentiles, max-load search, EMU
* :mod:`herasim.profiler` - per-model QPS profiles and scalability classification
* :mod:`herasim.affinity` - pairwise co-location affinity estimation
* :mod:`herasim.scheduler` - cluster-level model-to-server planners
* :mod:`herasim.rmu` - node-level runtime resource management policies
* :mod:`herasim.harness` - end-to-end experiments, reports, and figures
"""

__version__ = "0.1.0"
