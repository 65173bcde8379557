#!/usr/bin/env python
# Walk through the three networks: parameter counts, receptive fields and
# the spatial size after every layer.
from advseg.nets import (build_dilated, build_discriminator, build_fcn, discriminator_trace, param_count,
                         receptive_field, summary, trace)

for C in (7, 8):
    fcn, dil = build_fcn(C), build_dilated(C)
    print(f"C={C}: fcn {param_count(fcn):,} conv params, dilated {param_count(dil):,}")

# the FCN grows its receptive field by 2 per 3x3 layer, the dilated net
# doubles it with every dilation step
for spec, size in ((build_fcn(7), 51), (build_dilated(7), 87)):
    print(spec.name, "RF", receptive_field(spec), "sizes", trace(spec.layers, size))

# the discriminator looks at 21x21 label maps plus the 25x25 image patch
img, trunk = discriminator_trace(build_discriminator(7))
print("image branch", img)
print("trunk", trunk)

# everything in one dict, as `advseg inspect` prints it
print(summary(build_dilated(7)))
