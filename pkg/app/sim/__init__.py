# Discrete-event simulation package
