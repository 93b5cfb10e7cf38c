# Live mode: stub nodes, the routing gateway and its client
