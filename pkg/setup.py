# Copyright (c) 2017 David Preece, All rights reserved.
#
# Permission to use, copy, modify, and/or distribute this software for any
# purpose with or without fee is hereby granted.
#
# THE SOFTWARE IS PROVIDED "AS IS" AND THE AUTHOR DISCLAIMS ALL WARRANTIES
# WITH REGARD TO THIS SOFTWARE INCLUDING ALL IMPLIED WARRANTIES OF
# MERCHANTABILITY AND FITNESS. IN NO EVENT SHALL THE AUTHOR BE LIABLE FOR
# ANY SPECIAL, DIRECT, INDIRECT, OR CONSEQUENTIAL DAMAGES OR ANY DAMAGES
# WHATSOEVER RESULTING FROM LOSS OF USE, DATA OR PROFITS, WHETHER IN AN
# ACTION OF CONTRACT, NEGLIGENCE OR OTHER TORTIOUS ACTION, ARISING OUT OF
# OR IN CONNECTION WITH THE USE OR PERFORMANCE OF THIS SOFTWARE.

from setuptools import setup, find_packages

setup(name='cmtd',
      version='1.0.0',
      author='David Preece',
      author_email='davep@20ft.nz',
      license='BSD',
      packages=find_packages(exclude=["docs*", "build*"]),
      install_requires=['numpy>=1.20', 'shortuuid', 'cbor', 'psutil'],
      description='Collaborative multi-task adversarial defence toolkit',
      long_description="Trains classifiers with paired robust labels and a gradient lock, detects adversarial " +
                       "examples by label pair, and runs the attacks and experiments to evaluate it.",
      keywords='adversarial examples robustness defence detection carlini wagner fgsm deepfool jsma',
      classifiers=[
          'Development Status :: 4 - Beta',
          'Intended Audience :: Science/Research',
          'Intended Audience :: Developers',
          'License :: OSI Approved :: BSD License',
          'Natural Language :: English',
          'Topic :: Scientific/Engineering :: Artificial Intelligence',
          'Topic :: Security',
          'Programming Language :: Python :: 3.8',
          'Programming Language :: Python :: 3.9',
          'Programming Language :: Python :: 3.10'
      ],
      entry_points={
          'console_scripts': ['cmtd=cmtd.cli.cmtd:main']
      }
      )
