# Adapters for replica execution backends
