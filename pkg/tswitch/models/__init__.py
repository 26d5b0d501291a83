from tswitch.models.toy_nets import ToyMLP, ModelSpec
