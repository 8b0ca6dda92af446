from setuptools import setup
from setuptools import find_packages 
import os.path as path

# Get the path to our current directory
path_here = path.abspath(path.dirname(__file__))

# Get the package version from its universal storage location, spkadapt/version.py
version = {}
version_path = path.join(path_here, "spkadapt", "version.py")
with open(version_path) as fp:
	exec(fp.read(), version)

# Get the long description from the README file
readme_path = path.join(path_here, "README.md")
with open(readme_path) as readme_file:
    readme_text = readme_file.read()

setup(name='spkadapt',
	version=version['__version__'],
	description='Speaker and environment adaptation for BLSTM acoustic models: i-vectors and affine transformation layers',
	long_description=readme_text,
	long_description_content_type='text/markdown',
	author='The spkadapt Authors',
	license='Apache 2.0',
	packages=find_packages(
        where='.',
        include=['spkadapt*'],  # ["*"] by default
        exclude=[],  # empty by default
    ),
	install_requires=[
		'numpy>=1.22.0',
		'pandas>=2.1.0',
		'scipy>=1.10.0',
        'tqdm>=4.65.0',
	],
	extras_require={
		'test': ['pytest>=7.0'],
	},
	entry_points={
		'console_scripts': ['spkadapt=spkadapt.cli:main'],
	},
	classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'Topic :: Multimedia :: Sound/Audio :: Speech',
        'License :: OSI Approved :: Apache Software License',
	],
	keywords='speech recognition speaker adaptation i-vector blstm acoustic model',
	python_requires='>=3.9',
	zip_safe=False,
	include_package_data=True,
)
